"""TiLense: tile-occlusion importance for black-box chat classifiers.

A base answer is fixed by majority vote over repeated unmasked queries. Each
of nine overlapping tiles is then masked and re-queried the same number of
times; every answer that differs from the base answer adds one point to the
tile. Tile scores become per-pixel heat in [0, 1] and a white-to-red map.
"""

from __future__ import annotations

import io
import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import prompts
from .backends import TILENSE_PARAMS, Backend, GenerationParams, converse
from .extraction import extract, to_task_label

FILL_POLICIES = ("black", "mean")
HEAT_MODES = ("mean", "max")
DEFAULT_PROMPT = "simple_detect"


@dataclass(frozen=True)
class Tile:
    x: int
    y: int
    w: int
    h: int

    def contains(self, px: int, py: int) -> bool:
        return self.x <= px < self.x + self.w and self.y <= py < self.y + self.h

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class TileGrid:
    image_w: int
    image_h: int
    window_w: int
    window_h: int
    stride_x: int
    stride_y: int
    tiles: tuple[Tile, ...]

    def coverage(self) -> np.ndarray:
        cov = np.zeros((self.image_h, self.image_w), dtype=np.int32)
        for t in self.tiles:
            cov[t.slices] += 1
        return cov

    def to_dict(self) -> dict:
        return {
            "image_w": self.image_w, "image_h": self.image_h,
            "window_w": self.window_w, "window_h": self.window_h,
            "stride_x": self.stride_x, "stride_y": self.stride_y,
            "tiles": [t.as_list() for t in self.tiles],
        }


def make_grid(w: int, h: int) -> TileGrid:
    """3x3 grid of half-size windows at quarter-size strides.

    Windows at the far edge are clipped to the image when rounding would push
    them past it.
    """
    if w < 4 or h < 4:
        raise ValueError(f"image must be at least 4x4 for a tile grid, got {w}x{h}")
    ww, wh = math.ceil(w / 2), math.ceil(h / 2)
    sx, sy = math.ceil(w / 4), math.ceil(h / 4)
    tiles = tuple(
        Tile(x, y, min(ww, w - x), min(wh, h - y))
        for y in (0, sy, 2 * sy)
        for x in (0, sx, 2 * sx)
    )
    grid = TileGrid(w, h, ww, wh, sx, sy, tiles)
    if (grid.coverage() == 0).any():
        raise AssertionError(f"tile grid for {w}x{h} leaves pixels uncovered")
    return grid


def mask_tile(image: np.ndarray, tile: Tile, fill: str = "black") -> np.ndarray:
    image = np.asarray(image)
    h, w = image.shape[:2]
    if tile.x < 0 or tile.y < 0 or tile.w <= 0 or tile.h <= 0 or tile.x + tile.w > w or tile.y + tile.h > h:
        raise ValueError(f"tile {tile} outside {w}x{h} image")
    if fill not in FILL_POLICIES:
        raise ValueError(f"fill must be one of {FILL_POLICIES}, got {fill!r}")
    out = image.copy()
    if fill == "black":
        out[tile.slices] = 0
    else:
        mean = image.reshape(h * w, -1).mean(axis=0)
        out[tile.slices] = np.rint(mean).astype(image.dtype).reshape(image.shape[2:] or ())
    return out


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def majority_vote(labels: list[str]) -> tuple[str, dict[str, int], bool]:
    """Most frequent label; ties go to the lexicographically smallest and are flagged."""
    if not labels:
        raise ValueError("no answers to vote on")
    votes = Counter(labels)
    top = max(votes.values())
    tied = sorted(lab for lab, n in votes.items() if n == top)
    return tied[0], dict(sorted(votes.items())), len(tied) > 1


def _ask(backend, image_png: bytes, template, params, task, llm_backend) -> str:
    conv = prompts.render(template, image_png)
    reply = converse(backend, conv, params)[-1].raw_text
    return to_task_label(extract(reply, task, llm_backend), task)


def vote_base_answer(
    backend: Backend,
    image: np.ndarray,
    prompt: str = DEFAULT_PROMPT,
    n_runs: int = 5,
    task: str = "detect",
    params: GenerationParams = TILENSE_PARAMS,
    llm_backend: Optional[Backend] = None,
) -> tuple[str, dict[str, int], bool]:
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    png = encode_png(image)
    labels = [_ask(backend, png, prompt, params, task, llm_backend) for _ in range(n_runs)]
    return majority_vote(labels)


@dataclass
class TileScores:
    n_runs: int
    base_answer: str
    base_votes: dict[str, int]
    per_tile: list[int]
    low_confidence: bool = False
    tile_votes: list[dict[str, int]] = field(default_factory=list)

    def __post_init__(self):
        if any(not 0 <= s <= self.n_runs for s in self.per_tile):
            raise ValueError(f"tile scores must lie in [0, {self.n_runs}]: {self.per_tile}")


def score_tiles(
    backend: Backend,
    image: np.ndarray,
    prompt: str,
    grid: TileGrid,
    base_answer: str,
    n_runs: int = 5,
    fill: str = "black",
    task: str = "detect",
    params: GenerationParams = TILENSE_PARAMS,
    llm_backend: Optional[Backend] = None,
    max_workers: int = 1,
    base_votes: Optional[dict[str, int]] = None,
    low_confidence: bool = False,
) -> TileScores:
    masked = [encode_png(mask_tile(image, t, fill)) for t in grid.tiles]
    jobs = [(i, r) for i in range(len(grid.tiles)) for r in range(n_runs)]

    def run(job):
        i, _ = job
        return i, _ask(backend, masked[i], prompt, params, task, llm_backend)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            answers = list(pool.map(run, jobs))
    else:
        answers = [run(j) for j in jobs]
    per_tile = [0] * len(grid.tiles)
    tile_votes: list[Counter] = [Counter() for _ in grid.tiles]
    for i, label in answers:
        tile_votes[i][label] += 1
        if label != base_answer:
            per_tile[i] += 1
    return TileScores(n_runs, base_answer, dict(base_votes or {}), per_tile, low_confidence,
                      [dict(sorted(v.items())) for v in tile_votes])


def pixel_heat(grid: TileGrid, scores: TileScores, mode: str = "mean") -> np.ndarray:
    """Per-pixel heat from the flip rates (score / n_runs) of the covering tiles.

    ``mode="mean"`` averages over covering tiles, ``"max"`` takes the largest.
    """
    if mode not in HEAT_MODES:
        raise ValueError(f"mode must be one of {HEAT_MODES}, got {mode!r}")
    if len(scores.per_tile) != len(grid.tiles):
        raise ValueError("scores do not match the grid's tile count")
    acc = np.zeros((grid.image_h, grid.image_w), dtype=np.float64)
    for tile, s in zip(grid.tiles, scores.per_tile):
        rate = s / scores.n_runs
        if mode == "mean":
            acc[tile.slices] += rate
        else:
            np.maximum(acc[tile.slices], rate, out=acc[tile.slices])
    if mode == "mean":
        acc /= grid.coverage()
    return np.clip(acc, 0.0, 1.0)


def heat_colors(heat: np.ndarray) -> np.ndarray:
    """White (0) to red (1), as uint8 RGB."""
    heat = np.clip(np.asarray(heat, dtype=np.float64), 0.0, 1.0)
    gb = np.rint(255.0 * (1.0 - heat)).astype(np.uint8)
    return np.stack([np.full_like(gb, 255), gb, gb], axis=-1)


def overlay(image: np.ndarray, heat: np.ndarray, opacity: float = 0.6) -> np.ndarray:
    """Blend the white-to-red colour over ``image`` with alpha ``opacity * heat``."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    img = img[..., :3]
    if img.shape[:2] != heat.shape:
        raise ValueError(f"heat shape {heat.shape} does not match image {img.shape[:2]}")
    alpha = (opacity * np.clip(heat, 0.0, 1.0))[..., None]
    out = img.astype(np.float64) * (1.0 - alpha) + heat_colors(heat).astype(np.float64) * alpha
    out = np.rint(out).astype(np.uint8)
    # Zero heat must leave the image untouched.
    out[heat <= 0] = img[heat <= 0]
    return out


def render_heatmap(
    image: np.ndarray,
    heat: np.ndarray,
    out_path: str | Path,
    sidecar: Optional[dict] = None,
    opacity: float = 0.6,
) -> dict[str, Path]:
    """Write the heat map PNG, the blended overlay PNG and the JSON sidecar.

    ``out_path`` names the heat map (``<id>.tilense.png``); the overlay and
    sidecar sit next to it as ``<id>.tilense_overlay.png`` and ``<id>.tilense.json``.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    stem = out_path.name[: -len(".png")] if out_path.name.endswith(".png") else out_path.name
    overlay_path = out_path.with_name(f"{stem}_overlay.png")
    json_path = out_path.with_name(f"{stem}.json")
    Image.fromarray(heat_colors(heat)).save(out_path)
    Image.fromarray(overlay(image, heat, opacity)).save(overlay_path)
    paths = {"heatmap": out_path, "overlay": overlay_path}
    if sidecar is not None:
        json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths["sidecar"] = json_path
    return paths


@dataclass
class TiLenseResult:
    image_id: str
    grid: TileGrid
    scores: TileScores
    heat: np.ndarray
    paths: dict[str, Path] = field(default_factory=dict)


def sidecar_dict(image_id, grid, scores, fill, prompt, heat_mode, task) -> dict:
    return {
        "image_id": image_id,
        "grid": grid.to_dict(),
        "n_runs": scores.n_runs,
        "fill": fill,
        "prompt": prompt,
        "task": task,
        "heat_mode": heat_mode,
        "base_answer": scores.base_answer,
        "base_votes": scores.base_votes,
        "low_confidence": scores.low_confidence,
        "per_tile": list(scores.per_tile),
        "tile_votes": scores.tile_votes,
    }


def run_tilense(
    backend: Backend,
    image: np.ndarray,
    image_id: str,
    out_dir: Optional[str | Path] = None,
    prompt: str = DEFAULT_PROMPT,
    n_runs: int = 5,
    fill: str = "black",
    task: str = "detect",
    heat_mode: str = "mean",
    params: GenerationParams = TILENSE_PARAMS,
    llm_backend: Optional[Backend] = None,
    max_workers: int = 1,
    extra_sidecar: Optional[dict] = None,
) -> TiLenseResult:
    """Full pipeline for one image: ``n_runs * (1 + tiles)`` backend calls."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    grid = make_grid(w, h)
    base, votes, low = vote_base_answer(backend, image, prompt, n_runs, task, params, llm_backend)
    scores = score_tiles(backend, image, prompt, grid, base, n_runs, fill, task, params, llm_backend,
                         max_workers, votes, low)
    heat = pixel_heat(grid, scores, heat_mode)
    result = TiLenseResult(image_id, grid, scores, heat)
    if out_dir is not None:
        side = sidecar_dict(image_id, grid, scores, fill, prompt, heat_mode, task)
        side.update(extra_sidecar or {})
        result.paths = render_heatmap(image, heat, Path(out_dir) / f"{image_id}.tilense.png", side)
    return result
