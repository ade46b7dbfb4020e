"""Bundled synthetic fixture: ellipse blobs on textured noise, exact masks.

Every CLI command and the end-to-end tests run against this generator, so
no real slide data is required anywhere. Each synthetic "slide" gets its
own background/foreground color offsets, which makes tiny labeled subsets
genuinely underdetermine the appearance distribution, the regime where
consistency training on unlabeled patches has something to add.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import zoom

from .catalog import DatasetId, DatasetManifest, PatchRecord, Role, save_manifest, save_mask

_BG_BASE = np.array([218.0, 196.0, 212.0])  # pale eosin-like background
_FG_BASE = np.array([142.0, 108.0, 168.0])  # darker basophilic blobs


@dataclass(frozen=True)
class FixtureSpec:
    size: int = 64
    n_labeled_wsis: int = 8
    labeled_per_wsi: int = 1
    n_unlabeled_wsis: int = 16
    unlabeled_per_wsi: int = 4
    n_centers: int = 4
    n_val_wsis: int = 5
    val_per_wsi: int = 4
    wsi_color_spread: float = 32.0
    texture_amp: float = 14.0
    noise_sigma: float = 7.0
    seed: int = 0


def _smooth_field(size: int, rng: np.random.Generator, cells: int = 8) -> np.ndarray:
    grid = rng.standard_normal((cells, cells, 3))
    return zoom(grid, (size / cells, size / cells, 1), order=1)


def synthesize_patch(size: int, wsi_offsets: tuple[np.ndarray, np.ndarray],
                     rng: np.random.Generator, spec: FixtureSpec
                     ) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair with 1-3 axis-aligned ellipses."""
    bg_off, fg_off = wsi_offsets
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = _BG_BASE + bg_off
    img += spec.texture_amp * _smooth_field(size, rng)

    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(1, 4))):
        rx = rng.uniform(0.12, 0.28) * size
        ry = rng.uniform(0.12, 0.28) * size
        cx = rng.uniform(rx, size - rx)
        cy = rng.uniform(ry, size - ry)
        inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        mask[inside] = 1
        color = _FG_BASE + fg_off + rng.uniform(-8, 8, size=3)
        img[inside] = color + spec.texture_amp * 0.5 * _smooth_field(size, rng)[inside]

    img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def _wsi_offsets(rng: np.random.Generator, spread: float
                 ) -> tuple[np.ndarray, np.ndarray]:
    return (rng.uniform(-spread, spread, size=3),
            rng.uniform(-spread * 0.75, spread * 0.75, size=3))


def _write_split(out: Path, prefix: str, n_wsis: int, per_wsi: int, labeled: bool,
                 spec: FixtureSpec, rng: np.random.Generator,
                 centers: int = 0) -> list[PatchRecord]:
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir = out / "masks"
    if labeled:
        mask_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for w in range(n_wsis):
        wsi = f"{prefix}{w:02d}"
        offsets = _wsi_offsets(rng, spec.wsi_color_spread)
        center = f"c{w % centers}" if centers else None
        for i in range(per_wsi):
            stem = f"{center}__{wsi}_{i:03d}" if center else f"{wsi}_{i:03d}"
            image, mask = synthesize_patch(spec.size, offsets, rng, spec)
            image_path = img_dir / f"{stem}.png"
            Image.fromarray(image).save(image_path)
            mask_path = None
            if labeled:
                mask_path = mask_dir / f"{stem}.png"
                save_mask(mask, mask_path)
            records.append(PatchRecord(
                patch_id=stem, dataset_id=DatasetId.SYNTHETIC, wsi_id=wsi,
                center_id=center, image_path=image_path, mask_path=mask_path,
                width=spec.size, height=spec.size, magnification=20.0,
            ))
    return records


def generate_fixture(out_dir: Path | str, spec: FixtureSpec | None = None
                     ) -> dict[str, Path]:
    """Write labeled/unlabeled/val trees plus ready-to-use manifests.

    Returns the manifest paths keyed by split name.
    """
    spec = spec or FixtureSpec()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)

    labeled = DatasetManifest(
        records=_write_split(out_dir / "labeled", "w", spec.n_labeled_wsis,
                             spec.labeled_per_wsi, True, spec, rng),
        role=Role.LABELED_TRAIN)
    unlabeled = DatasetManifest(
        records=_write_split(out_dir / "unlabeled", "u", spec.n_unlabeled_wsis,
                             spec.unlabeled_per_wsi, False, spec, rng,
                             centers=spec.n_centers),
        role=Role.UNLABELED_TRAIN)
    val = DatasetManifest(
        records=_write_split(out_dir / "val", "v", spec.n_val_wsis,
                             spec.val_per_wsi, True, spec, rng),
        role=Role.EXTERNAL_VALIDATION)

    paths = {}
    for name, manifest in (("labeled", labeled), ("unlabeled", unlabeled), ("val", val)):
        manifest.validate()
        path = out_dir / f"{name}.jsonl"
        save_manifest(manifest, path)
        paths[name] = path

    cfg_path = out_dir / "synthetic.cfg"
    cfg_path.write_text(
        "# desk-scale config for the bundled synthetic fixture\n"
        "run_id = synthetic\n"
        f"output_dir = {out_dir / 'runs'}\n"
        f"data.labeled_manifest = {paths['labeled']}\n"
        f"data.unlabeled_manifest = {paths['unlabeled']}\n"
        f"data.val_manifest = {paths['val']}\n"
        f"data.eval_manifests = val={paths['val']}\n"
        "model.variant = tiny\n"
        "train.lr = 0.05\n"
        "train.lr_schedule = poly\n"
        "train.batch_size_labeled = 4\n"
        "train.batch_size_unlabeled = 4\n"
        "train.epochs = 40\n"
        "train.dice_loss_weight = 1.0\n"
        f"augment.weak.crop_size = {spec.size}\n"
    )
    paths["config"] = cfg_path
    return paths
