"""Procedural trinocular scenes with exact ground-truth depth.

A scene is a textured fronto-parallel background plane plus a few textured
fronto-parallel rectangles in front of it. Textures are random-colour
checker grids defined in world units, so the projected cell size shrinks
with depth. Rendering is point-sampled at pixel centres (no anti-aliasing).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .warp import CameraRig

VIEWS = ("left", "center", "right")
TEXTURE_TABLE = 64  # texture colours repeat every TEXTURE_TABLE cells
COLOR_LO, COLOR_HI = 51, 204  # 8-bit colour range of texture cells


@dataclass(frozen=True)
class SceneConfig:
    min_depth: float = 5.0
    max_depth: float = 50.0
    max_objects: int = 4
    cell_size: float = 3.0
    object_width_px: tuple[float, float] = (12.0, 36.0)
    object_height_px: tuple[float, float] = (10.0, 28.0)

    def __post_init__(self):
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")
        if self.max_objects < 0:
            raise ValueError("max_objects must be non-negative")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(
            min_depth=float(d["min_depth"]),
            max_depth=float(d["max_depth"]),
            max_objects=int(d["max_objects"]),
            cell_size=float(d["cell_size"]),
            object_width_px=tuple(d["object_width_px"]),
            object_height_px=tuple(d["object_height_px"]),
        )


@dataclass(frozen=True)
class Rect:
    x0: float
    x1: float
    y0: float
    y1: float
    depth: float
    texture_seed: int


@dataclass(frozen=True)
class Scene:
    background_depth: float
    background_seed: int
    objects: tuple[Rect, ...] = ()
    cell_size: float = 3.0
    seed: int = 0


@dataclass
class ExampleRecord:
    images: dict  # view -> HxWx3 float32 in [0, 1]
    depths: dict  # view -> HxW float32 z-depth
    rig: CameraRig
    seed: int

    @property
    def left(self):
        return self.images["left"]

    @property
    def center(self):
        return self.images["center"]

    @property
    def right(self):
        return self.images["right"]


def sample_scene(seed: int, cfg: SceneConfig, rig: CameraRig) -> Scene:
    """Draw a scene deterministically from ``seed``.

    Object count is uniform in [1, max_objects] (zero objects when
    max_objects is 0). Depths are drawn uniformly in [min_depth, max_depth];
    the deepest draw becomes the background so every object is strictly in
    front of it. Object extents are drawn in pixels of the center view and
    converted to world units at the object's depth.
    """
    rng = np.random.default_rng([seed, 0x5CE9E])
    n_obj = int(rng.integers(1, cfg.max_objects + 1)) if cfg.max_objects > 0 else 0
    while True:
        depths = rng.uniform(cfg.min_depth, cfg.max_depth, size=n_obj + 1)
        order = np.argsort(depths)
        if n_obj == 0 or depths[order[-1]] > depths[order[-2]] * 1.02:
            break
    bg = float(depths[order[-1]])
    seeds = rng.integers(0, 2**31 - 1, size=n_obj + 1)
    objects = []
    for k in range(n_obj):
        z = float(depths[order[k]])
        wpx = rng.uniform(*cfg.object_width_px)
        hpx = rng.uniform(*cfg.object_height_px)
        ucen = rng.uniform(0, rig.width - 1)
        vcen = rng.uniform(0, rig.height - 1)
        x0 = (ucen - wpx / 2 - rig.cx) * z / rig.focal_px
        y0 = (vcen - hpx / 2 - rig.cy) * z / rig.focal_px
        objects.append(Rect(x0, x0 + wpx * z / rig.focal_px, y0, y0 + hpx * z / rig.focal_px, z, int(seeds[k + 1])))
    # draw far to near so nearer objects overwrite
    objects.sort(key=lambda r: -r.depth)
    return Scene(bg, int(seeds[0]), tuple(objects), cfg.cell_size, int(seed))


def _texture_table(seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x7E7])
    return rng.integers(COLOR_LO, COLOR_HI + 1, size=(TEXTURE_TABLE, TEXTURE_TABLE, 3)).astype(np.float32) / 255.0


def _shade(table: np.ndarray, X: np.ndarray, Y: np.ndarray, cell: float) -> np.ndarray:
    i = np.floor(X / cell).astype(np.int64) % TEXTURE_TABLE
    j = np.floor(Y / cell).astype(np.int64) % TEXTURE_TABLE
    return table[j, i]


def render_view(scene: Scene, rig: CameraRig, camera_x: float) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast one view; returns (HxWx3 image in [0,1], HxW z-depth)."""
    u = np.arange(rig.width, dtype=np.float64)[None, :]
    v = np.arange(rig.height, dtype=np.float64)[:, None]
    shape = (rig.height, rig.width)

    def world(z):
        X = (u - rig.cx) * z / rig.focal_px + camera_x
        Y = (v - rig.cy) * z / rig.focal_px
        return np.broadcast_to(X, shape), np.broadcast_to(Y, shape)

    z_bg = scene.background_depth
    X, Y = world(z_bg)
    image = _shade(_texture_table(scene.background_seed), X, Y, scene.cell_size)
    depth = np.full(shape, z_bg, dtype=np.float64)
    for obj in scene.objects:
        X, Y = world(obj.depth)
        hit = (X >= obj.x0) & (X < obj.x1) & (Y >= obj.y0) & (Y < obj.y1) & (obj.depth < depth)
        if not hit.any():
            continue
        colors = _shade(_texture_table(obj.texture_seed), X, Y, scene.cell_size)
        image = np.where(hit[..., None], colors, image)
        depth = np.where(hit, obj.depth, depth)
    return image.astype(np.float32), depth.astype(np.float32)


def render_record(scene: Scene, rig: CameraRig) -> ExampleRecord:
    images, depths = {}, {}
    for view in VIEWS:
        images[view], depths[view] = render_view(scene, rig, rig.camera_x(view))
    return ExampleRecord(images, depths, rig, scene.seed)


def scene_seed(global_seed: int, index: int) -> int:
    return int(np.random.default_rng([global_seed, index]).integers(0, 2**31 - 1))


def generate_records(
    count: int, rig: CameraRig, cfg: SceneConfig, global_seed: int, workers: int = 1
) -> list[ExampleRecord]:
    """Render ``count`` scenes; output does not depend on ``workers``."""
    seeds = [scene_seed(global_seed, i) for i in range(count)]

    def one(s):
        return render_record(sample_scene(s, cfg, rig), rig)

    if workers <= 1:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(one, seeds))


def compute_occlusion_mask(center_depth: np.ndarray, side_depth: np.ndarray, rig: CameraRig, direction: str, rel_tol: float = 0.01) -> np.ndarray:
    """1 where a center pixel is visible in the side view, 0 where occluded or off-image.

    Each center pixel is shifted by its ground-truth disparity (+d into the
    left view, -d into the right view) and rounded; it counts as visible when
    the side view's depth there matches within ``rel_tol``.
    """
    if direction not in ("left", "right"):
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    cd = np.asarray(center_depth, dtype=np.float64)
    sd = np.asarray(side_depth, dtype=np.float64)
    w = cd.shape[-1]
    sign = 1.0 if direction == "left" else -1.0
    land = np.rint(np.arange(w) + sign * rig.fb / cd).astype(np.int64)
    inside = (land >= 0) & (land < w)
    z_side = np.take_along_axis(sd, np.clip(land, 0, w - 1), axis=-1)
    visible = inside & (np.abs(z_side - cd) <= rel_tol * cd)
    return visible.astype(np.float32)


# ---------------------------------------------------------------------------
# on-disk dataset

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Dataset directory is missing files or inconsistent with its manifest."""


def write_dataset(
    records: Sequence[ExampleRecord], directory, cfg: SceneConfig, global_seed: int, rig: Optional[CameraRig] = None
) -> None:
    """Write images as 8-bit PNG, depths as PFM, plus ``manifest.json``."""
    import json
    import os

    from .fileio import write_pfm, write_png

    os.makedirs(directory, exist_ok=True)
    if records:
        rig = rig or records[0].rig
        if any(r.rig != rig for r in records):
            raise DatasetError("all records in a dataset must share one rig")
    for i, rec in enumerate(records):
        sub = os.path.join(directory, f"scene_{i:06d}")
        os.makedirs(sub, exist_ok=True)
        for view in VIEWS:
            write_png(os.path.join(sub, f"{view}.png"), rec.images[view])
            write_pfm(os.path.join(sub, f"depth_{view}.pfm"), rec.depths[view])
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": len(records),
        "rig": rig.to_dict() if rig is not None else None,
        "depth_range": [cfg.min_depth, cfg.max_depth],
        "global_seed": int(global_seed),
        "scene_config": cfg.to_dict(),
        "scene_seeds": [int(r.seed) for r in records],
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(directory) -> dict:
    import json
    import os

    path = os.path.join(directory, "manifest.json")
    if not os.path.isfile(path):
        raise DatasetError(f"{path}: manifest not found")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed manifest ({e})") from e
    for key in ("format_version", "count", "rig", "depth_range"):
        if key not in manifest:
            raise DatasetError(f"{path}: missing field {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format_version {manifest['format_version']}")
    return manifest


def read_dataset(directory, rig: Optional[CameraRig] = None) -> list[ExampleRecord]:
    """Load every scene listed in the manifest, checking counts and image sizes."""
    import os

    from .fileio import read_pfm, read_png

    manifest = read_manifest(directory)
    count = int(manifest["count"])
    scene_dirs = sorted(d for d in os.listdir(directory) if d.startswith("scene_"))
    if len(scene_dirs) != count:
        raise DatasetError(f"{directory}: manifest lists {count} scenes but {len(scene_dirs)} scene directories exist")
    if count == 0:
        return []
    m_rig = CameraRig.from_dict(manifest["rig"])
    if rig is not None and rig != m_rig:
        raise DatasetError(f"{directory}: manifest rig {m_rig} does not match expected {rig}")
    seeds = manifest.get("scene_seeds", [0] * count)
    records = []
    for i in range(count):
        sub = os.path.join(directory, f"scene_{i:06d}")
        if scene_dirs[i] != f"scene_{i:06d}":
            raise DatasetError(f"{directory}: expected scene_{i:06d}, found {scene_dirs[i]}")
        images, depths = {}, {}
        for view in VIEWS:
            images[view] = read_png(os.path.join(sub, f"{view}.png"))
            depths[view] = read_pfm(os.path.join(sub, f"depth_{view}.pfm"))
            if images[view].shape != (m_rig.height, m_rig.width, 3):
                raise DatasetError(f"{sub}/{view}.png: shape {images[view].shape} does not match rig")
            if depths[view].shape != (m_rig.height, m_rig.width):
                raise DatasetError(f"{sub}/depth_{view}.pfm: shape {depths[view].shape} does not match rig")
        records.append(ExampleRecord(images, depths, m_rig, int(seeds[i])))
    return records
