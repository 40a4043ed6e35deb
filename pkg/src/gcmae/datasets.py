"""Dataset ingestion: deterministic synthetic textures and image-folder tiling.

Both loaders produce the same in-memory `TileDataset`: a stack of float
tiles in [0, 1], dense integer ids with the training split occupying
[0, n_train) (the memory bank is addressed by these ids), per-tile labels
and split tags, and per-channel normalization stats computed on the train
split only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

IMAGE_EXTENSIONS = (".png", ".ppm")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | image-folder
    tile_size: int = 64
    channels: int = 3
    classes: int = 2
    n_train: int = 1000
    n_test: int = 200
    seed: int = 0
    folder: str | None = None
    test_fraction: float = 0.2
    mpp: float | None = None  # microns per pixel, metadata only

    def __post_init__(self):
        if self.kind not in ("synthetic", "image-folder"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")


@dataclass
class TileDataset:
    pixels: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    ids: np.ndarray  # dense int64, train tiles first
    labels: np.ndarray  # int64
    split: np.ndarray  # '<U5' of {"train", "test"}
    sources: list[str]
    grid_xy: np.ndarray  # (n, 2) int64 pixel offsets, (0, 0) for synthetic
    class_names: list[str]
    stats: tuple[np.ndarray, np.ndarray]  # per-channel (mean, std) on train
    load_report: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return int((self.split == "train").sum())

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def save_manifest(self, path) -> None:
        """One line per tile: id, source, grid offsets, label, split."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["id,source,grid_x,grid_y,label,split"]
        for i in range(len(self.ids)):
            lines.append(
                f"{self.ids[i]},{self.sources[i]},{self.grid_xy[i, 0]},"
                f"{self.grid_xy[i, 1]},{self.labels[i]},{self.split[i]}"
            )
        path.write_text("\n".join(lines) + "\n")


def compute_norm_stats(tiles) -> tuple[np.ndarray, np.ndarray]:
    """Streaming per-channel mean and population std over an iterable of tiles."""
    count = 0
    total = None
    total_sq = None
    for tile in tiles:
        tile = np.asarray(tile, dtype=np.float64)
        flat = tile.reshape(-1, tile.shape[-1])
        if total is None:
            total = flat.sum(axis=0)
            total_sq = (flat * flat).sum(axis=0)
        else:
            total += flat.sum(axis=0)
            total_sq += (flat * flat).sum(axis=0)
        count += flat.shape[0]
    if count == 0:
        raise ValueError("cannot compute normalization stats of an empty train split")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.sqrt(var)
    zero = np.flatnonzero(std == 0)
    if zero.size:
        raise ValueError(f"zero-variance channel {int(zero[0])} in train split")
    return mean.astype(np.float32), std.astype(np.float32)


def default_class_params(classes: int) -> list[tuple[float, float]]:
    """(cycles per tile, orientation in radians) per class; distinct by design."""
    return [(4.0 + 3.0 * k, np.pi * k / classes) for k in range(classes)]


def synth_dataset(n_train: int, n_test: int, classes: int = 2, tile_size: int = 64,
                  channels: int = 3, seed: int = 0,
                  class_params: list[tuple[float, float]] | None = None) -> TileDataset:
    """Procedural texture tiles: per-class oriented sinusoid plus noise.

    Classes differ in spatial frequency and orientation, never in mean
    intensity, so a classifier has to see texture, not color. Class labels
    round-robin within each split, keeping splits balanced. Deterministic
    per seed.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    params = class_params if class_params is not None else default_class_params(classes)
    if len(params) != classes:
        raise ValueError(f"got {len(params)} class params for {classes} classes")
    if len({(round(c, 9), round(t, 9)) for c, t in params}) < classes:
        warnings.warn("identical texture parameters for different classes; "
                      "labels will be unlearnable", stacklevel=2)

    rng = substream(seed, "synth")
    coords = np.linspace(0.0, 1.0, tile_size, endpoint=False)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    channel_amp = np.linspace(1.0, 0.6, channels)

    n = n_train + n_test
    pixels = np.empty((n, tile_size, tile_size, channels), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    split = np.empty(n, dtype="<U5")
    for i in range(n):
        in_train = i < n_train
        label = (i if in_train else i - n_train) % classes
        cycles, theta = params[label]
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.15, 0.25)
        wave = np.sin(2.0 * np.pi * cycles * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        noise = rng.normal(0.0, 0.05, size=(tile_size, tile_size, channels))
        tile = 0.5 + amp * wave[..., None] * channel_amp + noise
        pixels[i] = np.clip(tile, 0.0, 1.0)
        labels[i] = label
        split[i] = "train" if in_train else "test"

    stats = compute_norm_stats(pixels[:n_train])
    return TileDataset(
        pixels=pixels,
        ids=np.arange(n, dtype=np.int64),
        labels=labels,
        split=split,
        sources=["synthetic"] * n,
        grid_xy=np.zeros((n, 2), dtype=np.int64),
        class_names=[f"class{k}" for k in range(classes)],
        stats=stats,
        load_report={"kind": "synthetic", "seed": seed, "class_params": params},
    )


def load_image_folder(folder, tile_size: int, seed: int = 0,
                      test_fraction: float = 0.2) -> TileDataset:
    """Folder-per-class loader with non-overlapping grid tiling.

    Images at least tile_size on both sides are grid-cropped; residual
    margins are discarded and counted in the load report. Smaller images are
    rejected with a warning, undecodable files are skipped with a warning,
    and an empty class directory is an error. Tile identity (path + grid
    offset) is stable across runs; the train/test split is a per-class
    seeded shuffle.
    """
    from PIL import Image, UnidentifiedImageError

    folder = Path(folder)
    class_dirs = sorted(d for d in folder.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"{folder}: no class subdirectories found")

    tiles = []  # (class_idx, source, gx, gy, pixels)
    margin_pixels = 0
    n_rejected = 0
    for ci, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        n_before = len(tiles)
        for path in files:
            try:
                with Image.open(path) as img:
                    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                warnings.warn(f"skipping undecodable file {path}: {exc}", stacklevel=2)
                continue
            h, w = arr.shape[:2]
            if h < tile_size or w < tile_size:
                warnings.warn(
                    f"rejecting {path}: {h}x{w} smaller than tile size {tile_size}",
                    stacklevel=2,
                )
                n_rejected += 1
                continue
            gh, gw = h // tile_size, w // tile_size
            margin_pixels += h * w - gh * gw * tile_size * tile_size
            rel = str(path.relative_to(folder))
            for gy in range(gh):
                for gx in range(gw):
                    crop = arr[gy * tile_size:(gy + 1) * tile_size,
                               gx * tile_size:(gx + 1) * tile_size]
                    tiles.append((ci, rel, gx * tile_size, gy * tile_size, crop))
        if len(tiles) == n_before:
            raise ValueError(f"class directory {cdir} produced no tiles")

    split_rng = substream(seed, "folder-split")
    is_test = np.zeros(len(tiles), dtype=bool)
    for ci in range(len(class_dirs)):
        members = np.array([i for i, t in enumerate(tiles) if t[0] == ci])
        n_test = int(round(test_fraction * len(members)))
        chosen = split_rng.permutation(members)[:n_test]
        is_test[chosen] = True

    order = np.concatenate([np.flatnonzero(~is_test), np.flatnonzero(is_test)])
    n = len(order)
    n_train = int((~is_test).sum())
    pixels = np.stack([tiles[i][4] for i in order])
    labels = np.array([tiles[i][0] for i in order], dtype=np.int64)
    sources = [tiles[i][1] for i in order]
    grid_xy = np.array([[tiles[i][2], tiles[i][3]] for i in order], dtype=np.int64)
    split = np.array(["train"] * n_train + ["test"] * (n - n_train), dtype="<U5")

    stats = compute_norm_stats(pixels[:n_train])
    return TileDataset(
        pixels=pixels,
        ids=np.arange(n, dtype=np.int64),
        labels=labels,
        split=split,
        sources=sources,
        grid_xy=grid_xy,
        class_names=[d.name for d in class_dirs],
        stats=stats,
        load_report={
            "kind": "image-folder",
            "folder": str(folder),
            "margin_pixels_discarded": int(margin_pixels),
            "images_rejected_too_small": int(n_rejected),
        },
    )


def build_dataset(spec: DatasetSpec) -> TileDataset:
    """Materialize a dataset from its spec."""
    if spec.kind == "synthetic":
        return synth_dataset(
            n_train=spec.n_train,
            n_test=spec.n_test,
            classes=spec.classes,
            tile_size=spec.tile_size,
            channels=spec.channels,
            seed=spec.seed,
        )
    if spec.folder is None:
        raise ValueError("image-folder dataset needs a folder path")
    return load_image_folder(spec.folder, spec.tile_size, seed=spec.seed,
                             test_fraction=spec.test_fraction)
