import json

import numpy as np
import pytest
from PIL import Image

from oracles import covering_tiles
from tilense_helpers import NORMAL_REPLY, POLYP_REPLY, bright_image, decode, point_sensitive
from vlmpolyp.backends import MockBackend, RunLedger
from vlmpolyp.tilense import (
    Tile,
    TileScores,
    encode_png,
    heat_colors,
    majority_vote,
    make_grid,
    mask_tile,
    overlay,
    pixel_heat,
    run_tilense,
    score_tiles,
    vote_base_answer,
)


def test_grid_300():
    g = make_grid(300, 300)
    assert [(t.x, t.y) for t in g.tiles] == [(x, y) for y in (0, 75, 150) for x in (0, 75, 150)]
    assert all((t.w, t.h) == (150, 150) for t in g.tiles)
    cov = g.coverage()
    # Pixel-count oracle: each tile covers 150*150 pixels, every pixel covered at least once.
    assert cov.sum() == 9 * 150 * 150 and cov.min() >= 1
    assert cov[112, 112] == 4 and cov[10, 10] == 1


def test_grid_minimum():
    g = make_grid(4, 4)
    assert [(t.x, t.y, t.w, t.h) for t in g.tiles] == [(x, y, 2, 2) for y in (0, 1, 2) for x in (0, 1, 2)]


def test_grid_non_square():
    g = make_grid(300, 200)
    assert (g.window_w, g.window_h, g.stride_x, g.stride_y) == (150, 100, 75, 50)
    assert all((t.w, t.h) == (150, 100) for t in g.tiles)


@pytest.mark.parametrize("w,h", [(5, 7), (13, 4), (301, 299), (640, 480), (17, 33)])
def test_grid_covers_every_pixel(w, h):
    g = make_grid(w, h)
    assert len(g.tiles) == 9 and g.coverage().min() >= 1
    assert all(t.x + t.w <= w and t.y + t.h <= h for t in g.tiles)


def test_grid_too_small():
    with pytest.raises(ValueError):
        make_grid(3, 10)


def test_mask_full_image_black():
    img = bright_image(8, 8)
    assert not mask_tile(img, Tile(0, 0, 8, 8)).any()


def test_mask_leaves_outside_untouched():
    img = bright_image()
    tile = make_grid(300, 300).tiles[4]
    out = mask_tile(img, tile)
    inside = np.zeros(img.shape[:2], bool)
    inside[tile.slices] = True
    assert out[~inside].tobytes() == img[~inside].tobytes()
    assert not out[inside].any()
    assert np.array_equal(img, bright_image())  # input not modified


def test_mask_mean_fill():
    img = np.zeros((4, 4, 3), np.uint8)
    img[0, 0] = 160
    out = mask_tile(img, Tile(2, 2, 2, 2), fill="mean")
    assert (out[2:, 2:] == 10).all()


def test_mask_out_of_bounds():
    with pytest.raises(ValueError):
        mask_tile(bright_image(10, 10), Tile(8, 8, 4, 4))


@pytest.mark.parametrize("labels,expected", [
    (["Polyp"] * 5, ("Polyp", {"Polyp": 5}, False)),
    (["Polyp"] * 3 + ["Normal"] * 2, ("Polyp", {"Normal": 2, "Polyp": 3}, False)),
    (["Polyp", "Polyp", "Normal", "Normal", "No-A"], ("Normal", {"No-A": 1, "Normal": 2, "Polyp": 2}, True)),
])
def test_majority_vote(labels, expected):
    assert majority_vote(labels) == expected


def test_vote_with_mock():
    b = MockBackend(default=POLYP_REPLY)
    assert vote_base_answer(b, bright_image(20, 20)) == ("Polyp", {"Polyp": 5}, False)


def test_constant_backend_scores_zero():
    g = make_grid(300, 300)
    s = score_tiles(MockBackend(default=POLYP_REPLY), bright_image(), "simple_detect", g, "Polyp")
    assert s.per_tile == [0] * 9


def test_point_sensitive_center():
    g = make_grid(300, 300)
    s = score_tiles(point_sensitive(), bright_image(), "simple_detect", g, "Polyp", n_runs=5)
    expected = covering_tiles(150, 150, 300, 300)
    assert expected == [4, 5, 7, 8]
    assert s.per_tile == [5 if i in expected else 0 for i in range(9)]


def test_tile_zero_only():
    g = make_grid(300, 300)
    s = score_tiles(point_sensitive(10, 10), bright_image(), "simple_detect", g, "Polyp", n_runs=5)
    assert s.per_tile == [5, 0, 0, 0, 0, 0, 0, 0, 0]


def _scores(per_tile, n=5):
    return TileScores(n, "Polyp", {"Polyp": n}, list(per_tile))


def test_heat_zero_and_saturated():
    g = make_grid(300, 300)
    assert not pixel_heat(g, _scores([0] * 9)).any()
    assert (pixel_heat(g, _scores([5] * 9)) == 1).all()


def test_heat_single_tile_is_one_over_k():
    g = make_grid(300, 300)
    heat = pixel_heat(g, _scores([5, 0, 0, 0, 0, 0, 0, 0, 0]))
    cov = g.coverage()
    inside = np.zeros_like(cov, bool)
    inside[g.tiles[0].slices] = True
    assert np.allclose(heat[inside], 1.0 / cov[inside])
    assert not heat[~inside].any()
    assert heat[10, 10] == 1.0 and heat[100, 100] == 0.25


def test_heat_max_mode():
    g = make_grid(300, 300)
    heat = pixel_heat(g, _scores([5, 0, 0, 0, 0, 0, 0, 0, 0]), mode="max")
    assert heat[100, 100] == 1.0 and heat[200, 200] == 0.0


def test_heat_monotone_in_scores():
    g = make_grid(40, 40)
    rng = np.random.default_rng(1)
    for _ in range(20):
        base = rng.integers(0, 5, 9)
        bumped = base.copy()
        bumped[rng.integers(9)] += 1
        assert (pixel_heat(g, _scores(bumped)) >= pixel_heat(g, _scores(base))).all()


def test_scores_bounded():
    with pytest.raises(ValueError):
        _scores([6] + [0] * 8)


def test_colors_and_overlay():
    assert (heat_colors(np.zeros((2, 2))) == 255).all()
    assert heat_colors(np.ones((1, 1))).tolist() == [[[255, 0, 0]]]
    img = bright_image(10, 10)
    assert np.array_equal(overlay(img, np.zeros((10, 10))), img)
    assert np.array_equal(overlay(img, np.ones((10, 10)), opacity=0.0), img)
    red = overlay(img, np.ones((10, 10)), opacity=1.0)
    assert (red == [255, 0, 0]).all()


def test_run_tilense_artifacts(tmp_path):
    ledger = RunLedger()
    res = run_tilense(point_sensitive(ledger=ledger), bright_image(), "img1", tmp_path, n_runs=5)
    assert len(ledger) == 5 * 10
    side = json.loads((tmp_path / "img1.tilense.json").read_text())
    assert side["per_tile"] == res.scores.per_tile == [0, 0, 0, 0, 5, 5, 0, 5, 5]
    assert side["base_answer"] == "Polyp" and side["n_runs"] == 5 and side["fill"] == "black"
    heat_png = np.asarray(Image.open(tmp_path / "img1.tilense.png"))
    assert heat_png.shape == (300, 300, 3)
    union = np.zeros((300, 300), bool)
    for i in (4, 5, 7, 8):
        union[res.grid.tiles[i].slices] = True
    assert res.heat[~union].sum() == 0 and res.heat[union].sum() > 0
    assert (tmp_path / "img1.tilense_overlay.png").exists()


def test_run_tilense_constant_is_white(tmp_path):
    res = run_tilense(MockBackend(default=NORMAL_REPLY), bright_image(60, 40), "c", tmp_path, n_runs=3)
    assert res.scores.per_tile == [0] * 9
    assert (np.asarray(Image.open(tmp_path / "c.tilense.png")) == 255).all()


def test_sidecar_deterministic(tmp_path):
    run_tilense(point_sensitive(), bright_image(), "a", tmp_path / "1")
    run_tilense(point_sensitive(), bright_image(), "a", tmp_path / "2")
    for name in ("a.tilense.json", "a.tilense.png", "a.tilense_overlay.png"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()


def test_parallel_matches_serial():
    g = make_grid(300, 300)
    serial = score_tiles(point_sensitive(), bright_image(), "simple_detect", g, "Polyp")
    parallel = score_tiles(point_sensitive(), bright_image(), "simple_detect", g, "Polyp", max_workers=4)
    assert serial == parallel


def test_encode_png_round_trip():
    img = bright_image(12, 9)
    from types import SimpleNamespace
    assert np.array_equal(decode(SimpleNamespace(image=encode_png(img))), img)
