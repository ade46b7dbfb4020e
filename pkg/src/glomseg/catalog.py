"""Patch manifests: discovery, splits, subsampling, RLE masks, tiling.

A manifest is the unit every other module consumes: a flat list of image
patches (optionally paired with binary masks) tagged with the slide and
center they came from. Slide ids drive fold splitting so that adjacent
tiles of one slide never straddle a train/validation boundary.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image


class CatalogError(Exception):
    """Raised for malformed directory layouts, manifests, or encodings."""


class DatasetId(str, Enum):
    HUBMAP_KIDNEY = "hubmap_kidney"
    HUBMAP_VASC = "hubmap_vasc"
    KPMP = "kpmp"
    NURTURE = "nurture"
    SYNTHETIC = "synthetic"


class Role(str, Enum):
    LABELED_TRAIN = "labeled_train"
    UNLABELED_TRAIN = "unlabeled_train"
    EXTERNAL_VALIDATION = "external_validation"


@dataclass(frozen=True)
class PatchRecord:
    """One image patch, optionally paired with a binary mask."""

    patch_id: str
    dataset_id: DatasetId
    wsi_id: str
    image_path: Path
    width: int
    height: int
    center_id: str | None = None
    mask_path: Path | None = None
    magnification: float = 20.0

    @property
    def labeled(self) -> bool:
        return self.mask_path is not None


@dataclass
class DatasetManifest:
    """A set of patch records with one role and optional fold assignment."""

    records: list[PatchRecord]
    role: Role
    fold_assignment: dict[str, int] | None = field(default=None)

    def __len__(self) -> int:
        return len(self.records)

    def wsi_ids(self) -> list[str]:
        return sorted({r.wsi_id for r in self.records})

    def center_ids(self) -> list[str]:
        return sorted({r.center_id for r in self.records if r.center_id is not None})

    def validate(self) -> None:
        """Check the role/mask contract and fold coverage."""
        need_mask = self.role in (Role.LABELED_TRAIN, Role.EXTERNAL_VALIDATION)
        for rec in self.records:
            if need_mask and rec.mask_path is None:
                raise CatalogError(
                    f"record {rec.patch_id} has no mask but role is {self.role.value}"
                )
            if self.role == Role.UNLABELED_TRAIN and rec.mask_path is not None:
                raise CatalogError(
                    f"record {rec.patch_id} carries a mask inside an unlabeled manifest"
                )
        ids = [r.patch_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise CatalogError("duplicate patch_id in manifest")
        if self.fold_assignment is not None:
            missing = [r.patch_id for r in self.records if r.patch_id not in self.fold_assignment]
            if missing:
                raise CatalogError(f"fold assignment missing for {missing[:3]}...")

    def subset(self, patch_ids: set[str]) -> "DatasetManifest":
        recs = [r for r in self.records if r.patch_id in patch_ids]
        folds = None
        if self.fold_assignment is not None:
            folds = {pid: f for pid, f in self.fold_assignment.items() if pid in patch_ids}
        return DatasetManifest(records=recs, role=self.role, fold_assignment=folds)


@dataclass(frozen=True)
class LayoutSpec:
    """Naming convention mapping files on disk to patch records.

    ``pattern`` is matched against the image file stem and must expose a
    ``wsi`` named group; a ``center`` group is optional. Masks are paired
    by identical stem inside ``mask_subdir``.
    """

    image_subdir: str = "images"
    mask_subdir: str | None = "masks"
    pattern: str = r"^(?:(?P<center>[A-Za-z0-9-]+)__)?(?P<wsi>[A-Za-z0-9-]+)_(?P<idx>\d+)$"
    extensions: tuple[str, ...] = (".png", ".tif", ".tiff", ".jpg")
    labeled: bool = True
    magnification: float = 20.0


# ---------------------------------------------------------------------------
# image / mask IO
# ---------------------------------------------------------------------------

def load_image(path: Path | str) -> np.ndarray:
    """Decode an RGB raster to a HxWx3 uint8 array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise CatalogError(f"unreadable image {path}: {exc}") from exc


def load_mask(path: Path | str) -> np.ndarray:
    """Decode a single-channel mask PNG; {0,255} or {0,1} maps to {0,1}."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise CatalogError(f"unreadable mask {path}: {exc}") from exc
    values = set(np.unique(arr).tolist())
    if values <= {0, 255}:
        return (arr == 255).astype(np.uint8)
    if values <= {0, 1}:
        return arr.astype(np.uint8)
    raise CatalogError(f"mask {path} has values outside {{0,1}}/{{0,255}}: {sorted(values)[:6]}")


def save_mask(mask: np.ndarray, path: Path | str) -> None:
    Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255)).save(path)


def _image_size(path: Path) -> tuple[int, int]:
    """(width, height) from the file header, without decoding pixels."""
    try:
        with Image.open(path) as im:
            return im.size
    except (OSError, ValueError) as exc:
        raise CatalogError(f"unreadable image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifest construction and persistence
# ---------------------------------------------------------------------------

def build_manifest(root: Path | str, dataset_id: DatasetId | str,
                   layout: LayoutSpec | None = None) -> DatasetManifest:
    """Scan a directory tree and build one record per discovered image.

    Labeled layouts require a same-stem mask for every image; an image
    without one is an error naming the unmatched patch.
    """
    root = Path(root)
    if not root.is_dir():
        raise CatalogError(f"root {root} does not exist")
    dataset_id = DatasetId(dataset_id)
    layout = layout or LayoutSpec()
    pattern = re.compile(layout.pattern)

    image_dir = root / layout.image_subdir
    if not image_dir.is_dir():
        # Accept flat trees where images sit directly under root.
        image_dir = root
    mask_dir = root / layout.mask_subdir if layout.mask_subdir else None

    records = []
    for path in sorted(image_dir.iterdir()):
        if not path.is_file() or path.suffix.lower() not in layout.extensions:
            continue
        m = pattern.match(path.stem)
        if m is None:
            raise CatalogError(f"file {path.name} does not match layout pattern {layout.pattern!r}")
        width, height = _image_size(path)
        mask_path = None
        if layout.labeled:
            if mask_dir is None:
                raise CatalogError("labeled layout needs a mask_subdir")
            candidates = [mask_dir / (path.stem + ext) for ext in layout.extensions]
            mask_path = next((c for c in candidates if c.is_file()), None)
            if mask_path is None:
                raise CatalogError(f"no mask found for labeled patch {path.stem}")
            mw, mh = _image_size(mask_path)
            if (mw, mh) != (width, height):
                raise CatalogError(
                    f"mask size {(mw, mh)} != image size {(width, height)} for {path.stem}"
                )
        records.append(PatchRecord(
            patch_id=path.stem,
            dataset_id=dataset_id,
            wsi_id=m.group("wsi"),
            center_id=m.groupdict().get("center"),
            image_path=path,
            mask_path=mask_path,
            width=width,
            height=height,
            magnification=layout.magnification,
        ))

    role = Role.LABELED_TRAIN if layout.labeled else Role.UNLABELED_TRAIN
    manifest = DatasetManifest(records=records, role=role)
    manifest.validate()
    return manifest


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    """Persist as JSON-Lines, one record per line; fold as added field."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in manifest.records:
            row = {
                "patch_id": rec.patch_id,
                "dataset_id": rec.dataset_id.value,
                "wsi_id": rec.wsi_id,
                "center_id": rec.center_id,
                "image_path": str(rec.image_path),
                "mask_path": str(rec.mask_path) if rec.mask_path else None,
                "width": rec.width,
                "height": rec.height,
                "magnification": rec.magnification,
            }
            if manifest.fold_assignment is not None:
                row["fold"] = manifest.fold_assignment[rec.patch_id]
            fh.write(json.dumps(row) + "\n")


def load_manifest(path: Path | str, role: Role | str | None = None) -> DatasetManifest:
    """Load a JSON-Lines manifest.

    When ``role`` is omitted it is inferred: all records masked means
    labeled training, none masked means unlabeled training; a mixed file
    is an error.
    """
    path = Path(path)
    if not path.is_file():
        raise CatalogError(f"manifest {path} does not exist")
    records = []
    folds: dict[str, int] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            rec = PatchRecord(
                patch_id=row["patch_id"],
                dataset_id=DatasetId(row["dataset_id"]),
                wsi_id=row["wsi_id"],
                center_id=row.get("center_id"),
                image_path=Path(row["image_path"]),
                mask_path=Path(row["mask_path"]) if row.get("mask_path") else None,
                width=int(row["width"]),
                height=int(row["height"]),
                magnification=float(row.get("magnification", 20.0)),
            )
            records.append(rec)
            if "fold" in row:
                folds[rec.patch_id] = int(row["fold"])

    if role is None:
        n_masked = sum(1 for r in records if r.mask_path is not None)
        if n_masked == len(records):
            role = Role.LABELED_TRAIN
        elif n_masked == 0:
            role = Role.UNLABELED_TRAIN
        else:
            raise CatalogError(
                f"manifest {path} mixes masked and unmasked records; pass an explicit role"
            )
    manifest = DatasetManifest(records=records, role=Role(role),
                               fold_assignment=folds or None)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# run-length encoded masks
# ---------------------------------------------------------------------------

def decode_rle(rle: str, height: int, width: int,
               order: str = "column_major") -> np.ndarray:
    """Decode space-separated 1-based (start, length) pairs to a mask.

    ``order`` selects how the flat index walks the grid; competition CSVs
    are column-major.
    """
    if order not in ("column_major", "row_major"):
        raise CatalogError(f"unknown RLE order {order!r}")
    n = height * width
    flat = np.zeros(n, dtype=np.uint8)
    tokens = rle.split()
    if tokens:
        if len(tokens) % 2 != 0:
            raise CatalogError(f"RLE has odd token count ({len(tokens)})")
        try:
            values = np.array([int(t) for t in tokens], dtype=np.int64)
        except ValueError as exc:
            raise CatalogError(f"RLE has non-integer token: {exc}") from exc
        starts, lengths = values[0::2], values[1::2]
        if (starts < 1).any() or (lengths < 1).any():
            raise CatalogError("RLE starts must be >= 1 and lengths >= 1")
        if ((starts - 1 + lengths) > n).any():
            raise CatalogError(f"RLE run exceeds pixel count {n}")
        for s, l in zip(starts - 1, lengths):
            flat[s:s + l] = 1
        if int(flat.sum()) != int(lengths.sum()):
            raise CatalogError("RLE runs overlap")
    if order == "column_major":
        return flat.reshape((width, height)).T.copy()
    return flat.reshape((height, width))


def encode_rle(mask: np.ndarray, order: str = "column_major") -> str:
    """Inverse of :func:`decode_rle` for a binary mask."""
    if order not in ("column_major", "row_major"):
        raise CatalogError(f"unknown RLE order {order!r}")
    mask = np.asarray(mask)
    flat = mask.T.reshape(-1) if order == "column_major" else mask.reshape(-1)
    padded = np.concatenate([[0], (flat != 0).astype(np.int8), [0]])
    changes = np.where(padded[1:] != padded[:-1])[0] + 1
    starts, ends = changes[0::2], changes[1::2]
    return " ".join(f"{s} {e - s}" for s, e in zip(starts, ends))


def read_rle_csv(path: Path | str) -> dict[str, str]:
    """Read an ``id,rle`` CSV into a mapping; empty rle means empty mask."""
    import csv

    out: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "rle"} <= set(reader.fieldnames):
            raise CatalogError(f"RLE csv {path} must have columns id,rle")
        for row in reader:
            out[row["id"]] = row["rle"] or ""
    return out


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

def tile_region(image: np.ndarray, patch_size: int, stride: int,
                boundary: str = "clamp") -> list[tuple[int, int, np.ndarray]]:
    """Cut a large region into full-size patches laid on a grid.

    With ``clamp`` the last row/column of tiles shifts inward so that
    every returned patch is exactly ``patch_size`` square and the full
    image stays covered (for stride <= patch_size). With ``drop``,
    positions that do not fit are simply omitted.
    """
    if boundary not in ("clamp", "drop"):
        raise CatalogError(f"unknown boundary mode {boundary!r}")
    if stride < 1:
        raise CatalogError("stride must be >= 1")
    h, w = image.shape[:2]
    if patch_size > min(h, w):
        raise CatalogError(f"patch_size {patch_size} exceeds image dims {(h, w)}")

    def positions(extent: int) -> list[int]:
        pos = list(range(0, extent - patch_size + 1, stride))
        if boundary == "clamp" and pos[-1] != extent - patch_size:
            pos.append(extent - patch_size)
        return pos

    tiles = []
    for y in positions(h):
        for x in positions(w):
            tiles.append((x, y, image[y:y + patch_size, x:x + patch_size]))
    return tiles


# ---------------------------------------------------------------------------
# splits and subsampling
# ---------------------------------------------------------------------------

def split_folds(manifest: DatasetManifest, k: int, seed: int) -> DatasetManifest:
    """Partition slides into k folds of near-equal slide counts.

    All patches of one slide land in one fold; deterministic per seed.
    """
    wsis = manifest.wsi_ids()
    if len(wsis) < k:
        raise CatalogError(f"only {len(wsis)} WSIs but k={k} folds requested")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(wsis))
    wsi_fold = {wsi: i % k for i, wsi in enumerate(order)}
    assignment = {r.patch_id: wsi_fold[r.wsi_id] for r in manifest.records}
    return DatasetManifest(records=list(manifest.records), role=manifest.role,
                           fold_assignment=assignment)


def sample_label_fraction(manifest: DatasetManifest, fraction: Fraction | float | str,
                          seed: int) -> DatasetManifest:
    """Uniform subsample of floor(fraction * N) records, stratified per WSI.

    Each slide contributes floor(fraction * n_wsi); the leftover needed to
    reach the global total goes to slides with the largest fractional
    parts (seeded tie-break), so small fractions still span slides.
    """
    if manifest.role != Role.LABELED_TRAIN:
        raise CatalogError(f"label-fraction sampling needs a {Role.LABELED_TRAIN.value} manifest")
    frac = Fraction(str(fraction)) if not isinstance(fraction, Fraction) else fraction
    if not (0 < frac <= 1):
        raise CatalogError(f"fraction {fraction} outside (0, 1]")
    if frac == 1:
        return DatasetManifest(records=list(manifest.records), role=manifest.role,
                               fold_assignment=manifest.fold_assignment)

    rng = np.random.default_rng(seed)
    target = int(frac * len(manifest.records))  # Fraction*int floors exactly via int()

    by_wsi: dict[str, list[PatchRecord]] = {}
    for rec in manifest.records:
        by_wsi.setdefault(rec.wsi_id, []).append(rec)
    wsis = sorted(by_wsi)

    quota = {w: int(frac * len(by_wsi[w])) for w in wsis}
    remainder = target - sum(quota.values())
    if remainder > 0:
        # Largest fractional part first; random jitter breaks exact ties.
        frac_part = {w: frac * len(by_wsi[w]) - quota[w] for w in wsis}
        jitter = {w: rng.random() for w in wsis}
        eligible = [w for w in wsis if quota[w] < len(by_wsi[w])]
        eligible.sort(key=lambda w: (-frac_part[w], jitter[w]))
        for w in eligible[:remainder]:
            quota[w] += 1

    keep: set[str] = set()
    for w in wsis:
        recs = by_wsi[w]
        chosen = rng.choice(len(recs), size=quota[w], replace=False)
        keep.update(recs[i].patch_id for i in chosen)
    return manifest.subset(keep)


def sample_centers(manifest: DatasetManifest, n_centers: int, per_center: int,
                   seed: int) -> DatasetManifest:
    """Pick n_centers centers at random and per_center patches from each."""
    if manifest.role != Role.UNLABELED_TRAIN:
        raise CatalogError(f"center sampling needs a {Role.UNLABELED_TRAIN.value} manifest")
    if n_centers == 0:
        return DatasetManifest(records=[], role=manifest.role)
    missing = [r.patch_id for r in manifest.records if r.center_id is None]
    if missing:
        raise CatalogError(f"records without center_id: {missing[:3]}...")
    centers = manifest.center_ids()
    if n_centers > len(centers):
        raise CatalogError(f"requested {n_centers} centers but only {len(centers)} present")

    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(centers, size=n_centers, replace=False).tolist())
    keep: set[str] = set()
    for center in chosen:
        recs = [r for r in manifest.records if r.center_id == center]
        if len(recs) < per_center:
            raise CatalogError(
                f"center {center} has {len(recs)} patches, fewer than per_center={per_center}"
            )
        idx = rng.choice(len(recs), size=per_center, replace=False)
        keep.update(recs[i].patch_id for i in idx)
    return manifest.subset(keep)


def fold_split_manifests(manifest: DatasetManifest, fold: int
                         ) -> tuple[DatasetManifest, DatasetManifest]:
    """(train, heldout) manifests for one fold of an assigned manifest."""
    if manifest.fold_assignment is None:
        raise CatalogError("manifest has no fold assignment; run split_folds first")
    train_ids = {pid for pid, f in manifest.fold_assignment.items() if f != fold}
    held_ids = {pid for pid, f in manifest.fold_assignment.items() if f == fold}
    train = manifest.subset(train_ids)
    held = manifest.subset(held_ids)
    held = replace(held, role=Role.EXTERNAL_VALIDATION)
    return train, held
