"""Synthetic scenes, log-distance radio maps and the distance-map input channel.

Grid coordinates follow the 1-based convention: a cell is addressed as
``(x, y)`` with ``1 <= x <= H`` (row) and ``1 <= y <= W`` (column).  The
transmitter-unknown protocol passes the sentinel ``(0, 0)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

UNKNOWN_TX = (0, 0)


@dataclass
class SceneGrid:
    """Obstacle occupancy maps plus transmitter placement for one scene."""

    obstacle_maps: list[np.ndarray]
    tx_pos: tuple[int, int] = UNKNOWN_TX
    tx_known: bool = True
    tx_strength: float = 0.0

    def __post_init__(self):
        self.obstacle_maps = [np.asarray(o, dtype=np.uint8) for o in self.obstacle_maps]
        if len(self.obstacle_maps) < 1:
            raise ValueError("a scene needs at least one obstacle channel")
        shape = self.obstacle_maps[0].shape
        if len(shape) != 2:
            raise ValueError(f"obstacle maps must be 2-D, got shape {shape}")
        for o in self.obstacle_maps:
            if o.shape != shape:
                raise ValueError("obstacle maps disagree on grid shape")
            if not np.isin(o, (0, 1)).all():
                raise ValueError("obstacle maps must be binary (0/1)")
        self.tx_pos = (int(self.tx_pos[0]), int(self.tx_pos[1]))
        if self.tx_known:
            x, y = self.tx_pos
            if not (1 <= x <= shape[0] and 1 <= y <= shape[1]):
                raise ValueError(f"tx_pos {self.tx_pos} outside the {shape[0]}x{shape[1]} grid")

    @property
    def height(self) -> int:
        return self.obstacle_maps[0].shape[0]

    @property
    def width(self) -> int:
        return self.obstacle_maps[0].shape[1]

    @property
    def m(self) -> int:
        return len(self.obstacle_maps)

    def occupancy(self) -> np.ndarray:
        """Union of all obstacle channels."""
        return np.any(np.stack(self.obstacle_maps), axis=0)


@dataclass
class RadioMap:
    """H x W signal-strength map.

    ``raw_min``/``raw_max`` keep the pre-normalization range when known, so a
    normalized map can be mapped back to simulator units.
    """

    values: np.ndarray
    normalized: bool = True
    raw_min: float | None = None
    raw_max: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all():
            raise ValueError("radio map contains NaN or Inf")
        if self.normalized and self.values.size:
            if self.values.min() < 0.0 or self.values.max() > 1.0:
                raise ValueError("normalized radio map must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def denormalized(self) -> np.ndarray:
        if not self.normalized:
            return self.values.copy()
        if self.raw_min is None or self.raw_max is None:
            raise ValueError("raw range unknown; cannot denormalize")
        return self.values * (self.raw_max - self.raw_min) + self.raw_min


def normalize_map(values) -> RadioMap:
    """Min-max normalize to [0, 1]; a constant input maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("cannot normalize a map containing NaN or Inf")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        out = np.zeros_like(v)
    else:
        out = (v - lo) / (hi - lo)
    return RadioMap(out, normalized=True, raw_min=lo, raw_max=hi)


def _cell_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(1, height + 1), np.arange(1, width + 1), indexing="ij")


def tx_distance(tx_pos, height: int, width: int) -> np.ndarray:
    """Euclidean transmitter-receiver distance (in cells) for every cell."""
    xr, yr = _cell_grid(height, width)
    return np.hypot(tx_pos[0] - xr, tx_pos[1] - yr)


def distance_map(tx_pos, height: int, width: int) -> np.ndarray:
    """Inverted, min-max normalized log-distance map.

    Equals 1 at the cell closest to ``tx_pos`` and 0 at the farthest one.
    ``tx_pos`` may lie outside the grid (e.g. the ``(0, 0)`` sentinel).
    """
    if height < 1 or width < 1 or height * width < 2:
        raise ValueError("distance map needs at least two cells")
    raw = np.log10(1.0 + tx_distance(tx_pos, height, width))
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        raise ValueError("all cells equidistant from the transmitter; normalization undefined")
    return 1.0 - (raw - lo) / (hi - lo)


def segment_cells(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Cells on the discrete segment between two 0-based cells, endpoints included.

    The k-th of ``n = max(|dr|, |dc|)`` steps lands on
    ``(r0 + floor(k*dr/n + 1/2), c0 + floor(k*dc/n + 1/2))``.
    """
    dr, dc = r1 - r0, c1 - c0
    n = max(abs(dr), abs(dc))
    if n == 0:
        return [(r0, c0)]
    k = np.arange(n + 1)
    rows = r0 + np.floor(k * dr / n + 0.5).astype(int)
    cols = c0 + np.floor(k * dc / n + 0.5).astype(int)
    return list(zip(rows.tolist(), cols.tolist()))


def obstruction_count(occupancy: np.ndarray, tx_pos) -> np.ndarray:
    """Number of occupied cells on the segment from the transmitter to each cell."""
    occ = np.asarray(occupancy, dtype=bool)
    height, width = occ.shape
    r0, c0 = tx_pos[0] - 1, tx_pos[1] - 1
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    dr, dc = rr - r0, cc - c0
    n = np.maximum(np.abs(dr), np.abs(dc))
    safe_n = np.maximum(n, 1)
    count = np.zeros((height, width), dtype=np.int64)
    for k in range(int(n.max()) + 1):
        active = k <= n
        r = r0 + np.floor(k * dr / safe_n + 0.5).astype(int)
        c = c0 + np.floor(k * dc / safe_n + 0.5).astype(int)
        r = np.where(active, r, 0)
        c = np.where(active, c, 0)
        count += (active & occ[r, c]).astype(np.int64)
    return count


def synth_raw(scene: SceneGrid, alpha: float, eta: float, sigma_delta: float, seed: int) -> np.ndarray:
    """Received strength ``I - (10*alpha*log10(d) + eta + shadowing)`` before normalization.

    The shadowing term is a per-cell Gaussian whose standard deviation is
    ``sigma_delta`` times the number of obstacle cells crossed on the way
    from the transmitter.  Distances are clamped to at least one cell.
    """
    if not scene.tx_known:
        raise ValueError("simulation requires a known transmitter position")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if sigma_delta < 0:
        raise ValueError("sigma_delta must be non-negative")
    d = np.maximum(tx_distance(scene.tx_pos, scene.height, scene.width), 1.0)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((scene.height, scene.width))
    shadow = sigma_delta * obstruction_count(scene.occupancy(), scene.tx_pos) * z
    return scene.tx_strength - (10.0 * alpha * np.log10(d) + eta + shadow)


def synth_radio_map(scene: SceneGrid, alpha: float, eta: float, sigma_delta: float, seed: int) -> RadioMap:
    return normalize_map(synth_raw(scene, alpha, eta, sigma_delta, seed))


def random_scene(
    height: int = 64,
    width: int = 64,
    m: int = 2,
    seed: int = 0,
    n_buildings: tuple[int, int] = (4, 9),
    building_size: tuple[int, int] = (3, 12),
    n_cars: tuple[int, int] = (4, 12),
    tx_strength: float = 0.0,
) -> SceneGrid:
    """Random city block: rectangular buildings on channel 0, small cars on
    the remaining channels, transmitter on a free cell."""
    rng = np.random.default_rng(seed)
    buildings = np.zeros((height, width), dtype=np.uint8)
    lo, hi = building_size
    for _ in range(rng.integers(n_buildings[0], n_buildings[1] + 1)):
        bh = int(rng.integers(lo, min(hi, height) + 1))
        bw = int(rng.integers(lo, min(hi, width) + 1))
        r = int(rng.integers(0, height - bh + 1))
        c = int(rng.integers(0, width - bw + 1))
        buildings[r:r + bh, c:c + bw] = 1
    maps = [buildings]
    for _ in range(m - 1):
        cars = np.zeros_like(buildings)
        for _ in range(rng.integers(n_cars[0], n_cars[1] + 1)):
            horizontal = bool(rng.integers(0, 2))
            ch, cw = (1, 2) if horizontal else (2, 1)
            r = int(rng.integers(0, height - ch + 1))
            c = int(rng.integers(0, width - cw + 1))
            if not buildings[r:r + ch, c:c + cw].any():
                cars[r:r + ch, c:c + cw] = 1
        maps.append(cars)
    free = np.argwhere(buildings == 0)
    if len(free) == 0:
        raise ValueError("no free cell for the transmitter")
    r, c = free[rng.integers(0, len(free))]
    return SceneGrid(maps, tx_pos=(int(r) + 1, int(c) + 1), tx_known=True, tx_strength=tx_strength)


def quantize(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass
class SimParams:
    alpha: float
    eta: float
    sigma_delta: float
    seed: int
    extra: dict = field(default_factory=dict)


def save_scene(directory, scene: SceneGrid, radio_map: RadioMap, params: SimParams) -> Path:
    """Write obstacle PNGs (0/255), the quantized map PNG and a JSON sidecar."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for i, o in enumerate(scene.obstacle_maps):
        Image.fromarray((o * 255).astype(np.uint8), mode="L").save(out / f"obstacle_{i}.png")
    Image.fromarray(quantize(radio_map.values), mode="L").save(out / "map.png")
    sidecar = {
        "tx_pos": list(scene.tx_pos),
        "tx_known": scene.tx_known,
        "tx_strength": scene.tx_strength,
        "alpha": params.alpha,
        "eta": params.eta,
        "sigma_delta": params.sigma_delta,
        "seed": params.seed,
        "raw_min": radio_map.raw_min,
        "raw_max": radio_map.raw_max,
        "m": scene.m,
        **params.extra,
    }
    (out / "scene.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return out


def load_scene(directory) -> tuple[SceneGrid, RadioMap, SimParams]:
    src = Path(directory)
    meta = json.loads((src / "scene.json").read_text())
    obstacles = [
        (np.asarray(Image.open(src / f"obstacle_{i}.png").convert("L")) > 0).astype(np.uint8)
        for i in range(meta["m"])
    ]
    scene = SceneGrid(obstacles, tuple(meta["tx_pos"]), meta["tx_known"], meta["tx_strength"])
    values = np.asarray(Image.open(src / "map.png").convert("L"), dtype=np.float64) / 255.0
    radio_map = RadioMap(values, True, meta.get("raw_min"), meta.get("raw_max"))
    known = {"tx_pos", "tx_known", "tx_strength", "alpha", "eta", "sigma_delta", "seed", "raw_min", "raw_max", "m"}
    params = SimParams(meta["alpha"], meta["eta"], meta["sigma_delta"], meta["seed"],
                       {k: v for k, v in meta.items() if k not in known})
    return scene, radio_map, params
