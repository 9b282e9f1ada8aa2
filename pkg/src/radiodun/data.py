"""Dataset ingestion, city-disjoint splits and model-ready samples."""

from __future__ import annotations

import json
import logging
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from .config import DatasetSpec, GeneratorConfig, RadioMapSeerSource, SceneDirSource, SyntheticSource
from .sampling import adjoint, build_plan, sample
from .scene import (
    UNKNOWN_TX,
    RadioMap,
    SceneGrid,
    SimParams,
    distance_map,
    load_scene,
    random_scene,
    save_scene,
    synth_radio_map,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DatasetError(RuntimeError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("dataset problems:\n" + "\n".join(f"  - {p}" for p in problems))


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


@dataclass
class Record:
    """One (scene, radio map) pair.  ``city`` groups pairs for splitting."""

    city: int
    tx_index: int
    scene: SceneGrid | None = None
    radio_map: RadioMap | None = None
    paths: dict = field(default_factory=dict)
    params: SimParams | None = None

    def load(self) -> tuple[SceneGrid, RadioMap]:
        if self.scene is not None and self.radio_map is not None:
            return self.scene, self.radio_map
        return _load_radiomapseer_pair(self.paths)


# ---------------------------------------------------------------- synthetic

def make_synthetic(gen: GeneratorConfig, count: int, seed: int) -> list[Record]:
    """``count`` scenes, each with ``tx_per_scene`` transmitters; deterministic per seed."""
    records = []
    for city in range(count):
        base = random_scene(gen.height, gen.width, gen.m, seed=derive_seed(seed, city, 0),
                            n_buildings=gen.n_buildings, building_size=gen.building_size,
                            n_cars=gen.n_cars, tx_strength=gen.tx_strength)
        free = np.argwhere(base.obstacle_maps[0] == 0)
        rng = np.random.default_rng(derive_seed(seed, city, 1))
        for t in range(gen.tx_per_scene):
            scene = base
            if t > 0:
                r, c = free[rng.integers(0, len(free))]
                scene = replace(base, tx_pos=(int(r) + 1, int(c) + 1))
            map_seed = derive_seed(seed, city, t, 2)
            radio_map = synth_radio_map(scene, gen.alpha, gen.eta, gen.sigma_delta, map_seed)
            records.append(Record(city, t, scene, radio_map,
                                  params=SimParams(gen.alpha, gen.eta, gen.sigma_delta, map_seed)))
    return records


def write_scene_tree(records: list[Record], out_dir) -> Path:
    """Persist records as ``<out>/scene_<city>_<tx>/`` directories plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for rec in records:
        name = f"scene_{rec.city:05d}_{rec.tx_index:02d}"
        params = rec.params or SimParams(float("nan"), float("nan"), float("nan"), -1)
        params = replace(params, extra={"city": rec.city, "tx_index": rec.tx_index})
        save_scene(out / name, rec.scene, rec.radio_map, params)
        names.append(name)
    (out / "manifest.json").write_text(json.dumps({"scenes": names}, indent=2))
    return out


def load_scene_tree(path) -> list[Record]:
    root = Path(path)
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise DatasetError([f"missing {manifest}"])
    records = []
    for name in json.loads(manifest.read_text())["scenes"]:
        scene, radio_map, params = load_scene(root / name)
        records.append(Record(params.extra["city"], params.extra["tx_index"], scene, radio_map, params=params))
    return records


# ------------------------------------------------------------- RadioMapSeer

_PAIR = re.compile(r"^(\d+)_(\d+)\.png$")


def _read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def _load_radiomapseer_pair(paths: dict) -> tuple[SceneGrid, RadioMap]:
    buildings = (_read_gray(paths["buildings"]) > 0).astype(np.uint8)
    cars = (_read_gray(paths["cars"]) > 0).astype(np.uint8)
    antenna = _read_gray(paths["antenna"])
    r, c = np.unravel_index(int(np.argmax(antenna)), antenna.shape)
    scene = SceneGrid([buildings, cars], tx_pos=(int(r) + 1, int(c) + 1), tx_known=True)
    gain = _read_gray(paths["gain"]).astype(np.float64) / 255.0
    return scene, RadioMap(gain, normalized=True, raw_min=0.0, raw_max=255.0)


def _verify_image(path: Path) -> str | None:
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:  # PIL raises a zoo of exception types for bad files
        return f"{path}: {exc}"
    return None


def load_radiomapseer(root, variant: str = "DPM", verify: bool = True) -> tuple[list[Record], list[str]]:
    """Index a RadioMapSeer tree.

    Expected layout::

        <root>/png/buildings_complete/<city>.png
        <root>/png/cars/<city>.png
        <root>/png/antennas/<city>_<tx>.png
        <root>/gain/<variant>/<city>_<tx>.png

    Returns the records (images are read lazily) and a list of manifest notes
    for skipped corrupt files.  Missing files raise a ``DatasetError``
    listing every missing path.
    """
    root = Path(root)
    gain_dir = root / "gain" / variant
    if not gain_dir.is_dir():
        raise DatasetError([f"missing directory {gain_dir}"])
    pairs = []
    for p in sorted(gain_dir.iterdir()):
        match = _PAIR.match(p.name)
        if match:
            pairs.append((int(match.group(1)), int(match.group(2)), p))
    if not pairs:
        raise DatasetError([f"no <city>_<tx>.png files in {gain_dir}"])
    missing, records, notes = [], [], []
    for city, tx, gain in sorted(pairs):
        paths = {
            "gain": gain,
            "buildings": root / "png" / "buildings_complete" / f"{city}.png",
            "cars": root / "png" / "cars" / f"{city}.png",
            "antenna": root / "png" / "antennas" / f"{city}_{tx}.png",
        }
        absent = [str(v) for v in paths.values() if not v.exists()]
        if absent:
            missing.extend(absent)
            continue
        if verify:
            bad = [msg for msg in map(_verify_image, paths.values()) if msg]
            if bad:
                for msg in bad:
                    warnings.warn(f"skipping corrupt image {msg}")
                notes.extend(f"skipped ({city}, {tx}): {msg}" for msg in bad)
                continue
        records.append(Record(city, tx, paths=paths))
    if missing:
        raise DatasetError(sorted(set(missing)))
    return records, notes


# ------------------------------------------------------------------ splits

def split_cities(cities, ratios=(0.75, 0.05, 0.2), seed: int = 0) -> dict[str, set[int]]:
    """Disjoint train/val/test city sets; counts are rounded, test takes the remainder."""
    unique = sorted(set(int(c) for c in cities))
    perm = np.random.default_rng(seed).permutation(len(unique))
    shuffled = [unique[i] for i in perm]
    n = len(unique)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    return {
        "train": set(shuffled[:n_train]),
        "val": set(shuffled[n_train:n_train + n_val]),
        "test": set(shuffled[n_train + n_val:]),
    }


def split_records(records: list[Record], spec: DatasetSpec) -> dict[str, list[Record]]:
    groups = split_cities([r.city for r in records], spec.split_ratios, spec.seed)
    out = {name: [r for r in records if r.city in groups[name]] for name in SPLITS}
    perm = np.random.default_rng(derive_seed(spec.seed, 7)).permutation(len(out["train"]))
    out["train"] = [out["train"][i] for i in perm]
    if spec.train_subset_size is not None:
        out["train"] = out["train"][: spec.train_subset_size]
    return out


def take_fraction(records: list[Record], fraction: float) -> list[Record]:
    return records[: int(math.ceil(fraction * len(records)))]


# ---------------------------------------------------------------- samples

class RadioMapDataset(Dataset):
    """Model-ready tensors: observation scatter map, mask, environment channels, target.

    The environment stack holds the distance map (computed from the true
    transmitter, or from ``(0, 0)`` when the transmitter is withheld)
    followed by the binary obstacle maps.
    """

    def __init__(self, records: list[Record], spec: DatasetSpec):
        self.records = records
        self.spec = spec
        self._fixed_plan = {}

    def __len__(self):
        return len(self.records)

    def plan_for(self, idx: int, height: int, width: int):
        spec = self.spec
        if spec.sampling_kind == "grid":
            key = (height, width)
            if key not in self._fixed_plan:
                self._fixed_plan[key] = build_plan("grid", spec.samples_per_map, height, width)
            return self._fixed_plan[key]
        rec = self.records[idx]
        return build_plan("uniform_random", spec.samples_per_map, height, width,
                          seed=derive_seed(spec.seed, rec.city, rec.tx_index, 3))

    def arrays(self, idx: int) -> dict:
        rec = self.records[idx]
        scene, radio_map = rec.load()
        h, w = radio_map.shape
        plan = self.plan_for(idx, h, w)
        obs = sample(radio_map, plan, self.spec.noise_sigma,
                     seed=derive_seed(self.spec.seed, rec.city, rec.tx_index, 4))
        tx = scene.tx_pos if self.spec.tx_known else UNKNOWN_TX
        env = np.stack([distance_map(tx, h, w), *[o.astype(np.float64) for o in scene.obstacle_maps]])
        return {
            "y_map": adjoint(obs, plan)[None],
            "mask": plan.mask()[None],
            "env": env,
            "target": radio_map.values[None],
            "plan": plan,
            "observation": obs,
        }

    def __getitem__(self, idx: int) -> dict:
        a = self.arrays(idx)
        out = {k: torch.as_tensor(a[k], dtype=torch.float32) for k in ("y_map", "mask", "env", "target")}
        out["index"] = idx
        return out


def load_records(spec: DatasetSpec) -> tuple[list[Record], list[str]]:
    src = spec.source
    if isinstance(src, SyntheticSource):
        return make_synthetic(src.generator, src.count, spec.seed), []
    if isinstance(src, RadioMapSeerSource):
        return load_radiomapseer(src.root, src.variant)
    if isinstance(src, SceneDirSource):
        return load_scene_tree(src.path), []
    raise TypeError(f"unsupported source {type(src).__name__}")


def build_splits(spec: DatasetSpec) -> dict[str, RadioMapDataset]:
    records, notes = load_records(spec)
    if not records:
        raise DatasetError(["dataset is empty"])
    for note in notes:
        log.warning(note)
    return {name: RadioMapDataset(recs, spec) for name, recs in split_records(records, spec).items()}
