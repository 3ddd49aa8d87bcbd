import json

import numpy as np
import numpy.testing as npt
import pytest
from scipy.interpolate import RegularGridInterpolator

from gcgvt import tensorgrad as tg
from gcgvt.data import load_png
from gcgvt.explain import (COLORMAP, OVERLAY_ALPHA, ExplainReport, UnsupportedVariantError, colorize,
                           explain_sample, format_weight, normalize_map, overlay, rank_heads, rank_tokens,
                           upsample_bilinear, write_report)
from gcgvt.model import desk_preset, init_params

from .factories import random_sample, tiny_config


@pytest.fixture(scope="module")
def desk():
    config = desk_preset(variant="G", n_blocks=2)
    return config, init_params(config, 0), random_sample(np.random.default_rng(0), config, "d0")


def independent_head_order(report_dict):
    h = np.mean(np.array(report_dict["layer_head_weights"]), axis=0)
    names = report_dict["category_names"]
    return [names[i] for i in sorted(range(len(names)), key=lambda i: (-h[i], names[i]))]


def independent_token_order(column):
    return sorted(range(len(column)), key=lambda t: (-column[t], t))


def test_forced_gates_give_documented_ranking(desk):
    config, params, sample = desk
    report = explain_sample(sample, config, params, force_gates=[1.0, 0.5, 0.5, 0.0])
    assert report.head_ranking == ["income", "education", "housing", "household"]
    assert [p.role for p in report.panels] == ["top", "second", "lowest"]
    assert [p.category for p in report.panels] == ["income", "education", "household"]
    assert report.summary().startswith("d0: income (1.00), education (0.50)")


def test_uniform_attention_falls_back_to_raster_order(desk):
    config, params, sample = desk
    params = dict(params)
    for name in params:
        if ".attn.wq." in name or ".attn.wk." in name:
            params[name] = tg.Tensor(np.zeros(params[name].shape))
    report = explain_sample(sample, config, params)
    att = np.asarray(report.attention)
    npt.assert_array_equal(att, np.full(att.shape, 1.0 / att.shape[-1]))
    assert report.head_averaged_top_token == 0
    assert all(p.top_tokens == [0, 1] for p in report.panels)


def test_rankings_agree_with_serialized_diagnostics(desk, tmp_path):
    config, params, sample = desk
    report = explain_sample(sample, config, params)
    write_report(report, sample, config.grid_size, tmp_path)
    doc = json.loads((tmp_path / "d0" / "report.json").read_text())
    assert doc["head_ranking"] == independent_head_order(doc)
    att = np.array(doc["attention"])
    for panel in doc["panels"]:
        h = doc["category_names"].index(panel["category"])
        col = att[h].sum(axis=0)
        assert panel["top_tokens"] == independent_token_order(col)[:2]
    averaged = att.sum(axis=1).mean(axis=0)
    assert doc["head_averaged_top_token"] == independent_token_order(averaged)[0]
    assert ExplainReport.from_dict(doc) == report


def test_unsupported_variants():
    for variant in ("L", "vit"):
        config = tiny_config(variant)
        sample = random_sample(np.random.default_rng(0), config)
        with pytest.raises(UnsupportedVariantError):
            explain_sample(sample, config, init_params(config))
    config = tiny_config("G", head_weights_enabled=False)
    with pytest.raises(UnsupportedVariantError):
        explain_sample(random_sample(np.random.default_rng(0), config), config, init_params(config))


def test_rank_helpers():
    assert rank_heads([0.2, 0.9, 0.2], ["c", "a", "b"]) == [1, 2, 0]
    assert rank_tokens([1.0, 3.0, 3.0, 0.5]) == [1, 2, 0, 3]
    assert format_weight("origin", 0.8666) == "origin (0.87)"


def test_normalize_map():
    npt.assert_array_equal(normalize_map(np.array([[2.0, 4.0], [3.0, 2.0]])), [[0, 1], [0.5, 0]])
    npt.assert_array_equal(normalize_map(np.full((2, 2), 7.0)), np.zeros((2, 2)))


def test_upsample_matches_grid_interpolator():
    rng = np.random.default_rng(3)
    grid, size = 4, 32
    m = rng.uniform(size=(grid, grid))
    centres = (np.arange(grid) + 0.5) * size / grid
    interp = RegularGridInterpolator((centres, centres), m)
    pix = np.clip(np.arange(size) + 0.5, centres[0], centres[-1])
    yy, xx = np.meshgrid(pix, pix, indexing="ij")
    ref = interp(np.stack([yy, xx], axis=-1))
    npt.assert_allclose(upsample_bilinear(m, size), ref, atol=1e-12)


def test_overlay_reproduces_map_at_patch_centres():
    rng = np.random.default_rng(4)
    m = rng.uniform(size=(3, 3))
    image = rng.uniform(size=(9, 9, 3))
    blended, heat = overlay(image, m)
    centres = [1, 4, 7]  # odd patch size: pixel centres coincide with patch centres
    npt.assert_allclose(heat[np.ix_(centres, centres)], normalize_map(m), atol=1e-12)
    expected = (1 - OVERLAY_ALPHA) * image[4, 4] + OVERLAY_ALPHA * colorize(normalize_map(m)[1, 1])
    npt.assert_allclose(blended[4, 4], expected, atol=1e-12)


def test_colormap_shape_and_endpoints():
    assert COLORMAP.shape == (256, 3)
    assert ((COLORMAP >= 0) & (COLORMAP <= 1)).all()
    # luminance increases from dark purple to yellow
    lum = COLORMAP @ np.array([0.299, 0.587, 0.114])
    assert np.all(np.diff(lum) > 0)


def test_report_files(desk, tmp_path):
    config, params, sample = desk
    report = explain_sample(sample, config, params)
    paths = write_report(report, sample, config.grid_size, tmp_path)
    names = {p.name for p in paths}
    assert "report.json" in names and "token_scores.csv" in names
    pngs = [p for p in paths if p.suffix == ".png"]
    assert len(pngs) == 6  # three head panels, the head average and two heads for the top token
    assert load_png(pngs[0]).shape == (64, 64, 3)
    lines = (tmp_path / "d0" / "token_scores.csv").read_text().strip().split("\n")
    assert lines[0] == "token,income,housing,education,household,head_averaged"
    assert len(lines) == 1 + config.n_patches
