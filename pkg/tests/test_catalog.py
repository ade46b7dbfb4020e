import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from glomseg.catalog import (
    CatalogError,
    DatasetId,
    DatasetManifest,
    LayoutSpec,
    PatchRecord,
    Role,
    build_manifest,
    decode_rle,
    encode_rle,
    load_manifest,
    read_rle_csv,
    sample_centers,
    sample_label_fraction,
    save_manifest,
    split_folds,
    tile_region,
)
from conftest import random_mask


# ---------------------------------------------------------------------------
# RLE
# ---------------------------------------------------------------------------

def brute_force_encode(mask: np.ndarray) -> str:
    """Independent oracle: walk pixels in column-major order, emit runs."""
    flat = mask.T.reshape(-1)
    runs = []
    run_start, run_len = None, 0
    for pos, v in enumerate(flat, start=1):
        if v:
            if run_start is None:
                run_start, run_len = pos, 0
            run_len += 1
        elif run_start is not None:
            runs.append((run_start, run_len))
            run_start = None
    if run_start is not None:
        runs.append((run_start, run_len))
    return " ".join(f"{s} {l}" for s, l in runs)


def test_decode_empty_string_is_all_zero():
    mask = decode_rle("", 4, 4)
    assert mask.shape == (4, 4)
    assert mask.sum() == 0


def test_decode_full_cover_run():
    mask = decode_rle("1 16", 4, 4)
    assert mask.shape == (4, 4)
    assert (mask == 1).all()


def test_decode_column_major_orientation():
    # start=1 len=4 fills the first column in column-major order
    mask = decode_rle("1 4", 4, 4)
    assert (mask[:, 0] == 1).all()
    assert mask[:, 1:].sum() == 0


def test_decode_matches_brute_force_oracle():
    rng = np.random.default_rng(3)
    mask = random_mask(rng, 8, 8)
    rle = brute_force_encode(mask)
    np.testing.assert_array_equal(decode_rle(rle, 8, 8), mask)


def test_roundtrip_random_masks():
    rng = np.random.default_rng(11)
    for _ in range(200):
        h, w = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        mask = random_mask(rng, h, w)
        np.testing.assert_array_equal(decode_rle(encode_rle(mask), h, w), mask)


@given(st.integers(1, 24), st.integers(1, 24), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_roundtrip_property(h, w, seed):
    mask = random_mask(np.random.default_rng(seed), h, w)
    np.testing.assert_array_equal(decode_rle(encode_rle(mask), h, w), mask)
    # brute-force oracle agrees with the vectorized encoder
    assert encode_rle(mask) == brute_force_encode(mask)


def test_decode_run_exceeding_pixels_errors():
    with pytest.raises(CatalogError, match="exceeds"):
        decode_rle("15 3", 4, 4)


def test_decode_odd_token_count_errors():
    with pytest.raises(CatalogError, match="odd token"):
        decode_rle("1 2 3", 4, 4)


def test_decode_overlapping_runs_error():
    with pytest.raises(CatalogError, match="overlap"):
        decode_rle("1 4 2 4", 4, 4)


def test_row_major_order():
    mask = decode_rle("1 4", 4, 4, order="row_major")
    assert (mask[0, :] == 1).all()
    assert mask[1:, :].sum() == 0


def test_rle_csv(tmp_path):
    path = tmp_path / "masks.csv"
    path.write_text("id,rle\na,1 4\nb,\n")
    table = read_rle_csv(path)
    assert table == {"a": "1 4", "b": ""}
    with pytest.raises(CatalogError, match="columns"):
        bad = tmp_path / "bad.csv"
        bad.write_text("foo,bar\n1,2\n")
        read_rle_csv(bad)


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

def _checker(h, w):
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[:, :, 0] = (np.add.outer(np.arange(h), np.arange(w)) % 251).astype(np.uint8)
    return img


def test_tile_exact_grid():
    tiles = tile_region(_checker(2048, 2048), 1024, 1024, boundary="drop")
    assert [(x, y) for x, y, _ in tiles] == [(0, 0), (1024, 0), (0, 1024), (1024, 1024)]
    assert all(t.shape == (1024, 1024, 3) for _, _, t in tiles)


def test_tile_single_patch():
    tiles = tile_region(_checker(1024, 1024), 1024, 1024)
    assert len(tiles) == 1 and tiles[0][:2] == (0, 0)


def test_tile_clamp_shifts_inward():
    # hand oracle: positions are {0, 1500-1024} = {0, 476} on both axes
    tiles = tile_region(_checker(1500, 1500), 1024, 1024, boundary="clamp")
    coords = [(x, y) for x, y, _ in tiles]
    assert coords == [(0, 0), (476, 0), (0, 476), (476, 476)]
    assert max(max(x, y) for x, y in coords) == 476
    assert all(t.shape == (1024, 1024, 3) for _, _, t in tiles)


def test_tile_content_matches_source():
    img = _checker(130, 90)
    for x, y, t in tile_region(img, 64, 48, boundary="clamp"):
        np.testing.assert_array_equal(t, img[y:y + 64, x:x + 64])


@given(st.integers(8, 60), st.integers(8, 60), st.integers(1, 20), st.integers(1, 20))
@settings(max_examples=60, deadline=None)
def test_tile_clamp_covers_every_pixel(h, w, patch, stride):
    patch = min(patch, h, w)
    stride = min(stride, patch)  # coverage holds for stride <= patch_size
    covered = np.zeros((h, w), dtype=bool)
    for x, y, t in tile_region(_checker(h, w), patch, stride, boundary="clamp"):
        covered[y:y + patch, x:x + patch] = True
    assert covered.all()


def test_tile_oversized_patch_errors():
    with pytest.raises(CatalogError, match="exceeds"):
        tile_region(_checker(100, 100), 128, 64)


def test_tile_unique_coordinates():
    tiles = tile_region(_checker(100, 100), 64, 40, boundary="clamp")
    coords = [(x, y) for x, y, _ in tiles]
    assert len(coords) == len(set(coords))


# ---------------------------------------------------------------------------
# manifests on disk
# ---------------------------------------------------------------------------

def _write_patch_tree(root, n_images, n_masks, size=16):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(n_images):
        stem = f"w{i % 3:02d}_{i:03d}"
        arr = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
        Image.fromarray(arr).save(root / "images" / f"{stem}.png")
        if i < n_masks:
            Image.fromarray((random_mask(rng, size, size) * 255)).save(
                root / "masks" / f"{stem}.png")


def test_build_manifest_pairs_masks(tmp_path):
    _write_patch_tree(tmp_path, 6, 6)
    manifest = build_manifest(tmp_path, DatasetId.HUBMAP_KIDNEY)
    assert len(manifest) == 6
    assert manifest.role == Role.LABELED_TRAIN
    assert all(r.mask_path is not None for r in manifest.records)
    assert manifest.wsi_ids() == ["w00", "w01", "w02"]


def test_build_manifest_empty_dir(tmp_path):
    (tmp_path / "images").mkdir()
    manifest = build_manifest(tmp_path, "kpmp")
    assert len(manifest) == 0


def test_build_manifest_missing_mask_names_patch(tmp_path):
    _write_patch_tree(tmp_path, 5, 4)
    with pytest.raises(CatalogError, match="w01_004"):
        build_manifest(tmp_path, DatasetId.HUBMAP_KIDNEY)


def test_build_manifest_unlabeled_layout(tmp_path):
    _write_patch_tree(tmp_path, 4, 0)
    layout = LayoutSpec(labeled=False, mask_subdir=None)
    manifest = build_manifest(tmp_path, DatasetId.NURTURE, layout)
    assert manifest.role == Role.UNLABELED_TRAIN
    assert all(r.mask_path is None for r in manifest.records)


def test_build_manifest_bad_pattern_names_file(tmp_path):
    (tmp_path / "images").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "images" / "oddname.png")
    layout = LayoutSpec(labeled=False, mask_subdir=None)
    with pytest.raises(CatalogError, match="oddname"):
        build_manifest(tmp_path, DatasetId.NURTURE, layout)


def test_manifest_roundtrip_jsonl(tmp_path, fixture_dir):
    manifest = load_manifest(fixture_dir / "labeled.jsonl")
    manifest = split_folds(manifest, 3, seed=0)
    out = tmp_path / "copy.jsonl"
    save_manifest(manifest, out)
    again = load_manifest(out)
    assert [r.patch_id for r in again.records] == [r.patch_id for r in manifest.records]
    assert again.fold_assignment == manifest.fold_assignment
    assert again.role == Role.LABELED_TRAIN


def test_load_manifest_infers_unlabeled(fixture_dir):
    manifest = load_manifest(fixture_dir / "unlabeled.jsonl")
    assert manifest.role == Role.UNLABELED_TRAIN
    assert manifest.center_ids() == ["c0", "c1", "c2", "c3"]


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

def _manifest_with_wsis(n_wsis, per_wsi, role=Role.LABELED_TRAIN):
    recs = []
    for w in range(n_wsis):
        for i in range(per_wsi):
            recs.append(PatchRecord(
                patch_id=f"w{w:02d}_{i:03d}", dataset_id=DatasetId.SYNTHETIC,
                wsi_id=f"w{w:02d}", image_path=f"/dev/null/w{w}_{i}.png",
                width=8, height=8,
                mask_path="/dev/null/m.png" if role != Role.UNLABELED_TRAIN else None,
                center_id=f"c{w % 3}",
            ))
    return DatasetManifest(records=recs, role=role)


def test_split_folds_15_wsis_into_5():
    manifest = _manifest_with_wsis(15, 4)
    out = split_folds(manifest, 5, seed=1)
    by_fold: dict[int, set] = {}
    for rec in out.records:
        by_fold.setdefault(out.fold_assignment[rec.patch_id], set()).add(rec.wsi_id)
    assert sorted(by_fold) == [0, 1, 2, 3, 4]
    assert all(len(ws) == 3 for ws in by_fold.values())


def test_split_folds_one_wsi_per_fold():
    out = split_folds(_manifest_with_wsis(5, 2), 5, seed=0)
    folds_per_wsi = {}
    for rec in out.records:
        folds_per_wsi.setdefault(rec.wsi_id, set()).add(out.fold_assignment[rec.patch_id])
    assert all(len(f) == 1 for f in folds_per_wsi.values())
    assert len({next(iter(f)) for f in folds_per_wsi.values()}) == 5


def test_split_folds_no_wsi_spans_folds():
    # exhaustive scan over the assignment
    manifest = _manifest_with_wsis(7, 5)
    out = split_folds(manifest, 3, seed=9)
    seen_patches = set()
    wsi_fold: dict[str, int] = {}
    for rec in out.records:
        fold = out.fold_assignment[rec.patch_id]
        assert rec.patch_id not in seen_patches
        seen_patches.add(rec.patch_id)
        assert wsi_fold.setdefault(rec.wsi_id, fold) == fold
    assert seen_patches == {r.patch_id for r in manifest.records}


def test_split_folds_deterministic():
    manifest = _manifest_with_wsis(10, 3)
    a = split_folds(manifest, 5, seed=4).fold_assignment
    b = split_folds(manifest, 5, seed=4).fold_assignment
    assert a == b


def test_split_folds_too_few_wsis():
    with pytest.raises(CatalogError, match="k=5"):
        split_folds(_manifest_with_wsis(3, 2), 5, seed=0)


# ---------------------------------------------------------------------------
# subsampling
# ---------------------------------------------------------------------------

def test_fraction_one_is_identity():
    manifest = _manifest_with_wsis(4, 5)
    out = sample_label_fraction(manifest, 1, seed=0)
    assert [r.patch_id for r in out.records] == [r.patch_id for r in manifest.records]


def test_fraction_half_of_3706():
    # 3706 records over 17 slides, mirroring the largest labeled set
    per = [218] * 17
    per[-1] = 3706 - 218 * 16
    recs = []
    for w, n in enumerate(per):
        for i in range(n):
            recs.append(PatchRecord(
                patch_id=f"w{w:02d}_{i:04d}", dataset_id=DatasetId.HUBMAP_KIDNEY,
                wsi_id=f"w{w:02d}", image_path="x.png", mask_path="m.png",
                width=8, height=8))
    manifest = DatasetManifest(records=recs, role=Role.LABELED_TRAIN)
    out = sample_label_fraction(manifest, "1/2", seed=0)
    assert len(out) == 1853


def test_fraction_deterministic_and_seed_sensitive():
    manifest = _manifest_with_wsis(10, 10)
    a = {r.patch_id for r in sample_label_fraction(manifest, "1/4", seed=5).records}
    b = {r.patch_id for r in sample_label_fraction(manifest, "1/4", seed=5).records}
    c = {r.patch_id for r in sample_label_fraction(manifest, "1/4", seed=6).records}
    assert a == b
    assert a != c


def test_fraction_stratified_across_wsis():
    manifest = _manifest_with_wsis(8, 16)
    out = sample_label_fraction(manifest, "1/8", seed=2)
    per_wsi = {}
    for rec in out.records:
        per_wsi[rec.wsi_id] = per_wsi.get(rec.wsi_id, 0) + 1
    assert len(out) == 16
    assert set(per_wsi.values()) == {2}  # every slide contributes floor(16/8)


def test_fraction_out_of_range():
    manifest = _manifest_with_wsis(2, 2)
    for bad in (0, -1, 2):
        with pytest.raises(CatalogError, match="outside"):
            sample_label_fraction(manifest, bad, seed=0)


def test_fraction_requires_labeled_role():
    manifest = _manifest_with_wsis(2, 2, role=Role.UNLABELED_TRAIN)
    with pytest.raises(CatalogError, match="labeled_train"):
        sample_label_fraction(manifest, "1/2", seed=0)


def test_sample_centers_counts():
    manifest = _manifest_with_wsis(9, 10, role=Role.UNLABELED_TRAIN)  # 3 centers x 30
    one = sample_centers(manifest, 1, per_center=20, seed=0)
    assert len(one) == 20
    assert len(one.center_ids()) == 1
    three = sample_centers(manifest, 3, per_center=20, seed=0)
    assert len(three) == 60


def test_sample_centers_zero_is_empty():
    manifest = _manifest_with_wsis(3, 4, role=Role.UNLABELED_TRAIN)
    assert len(sample_centers(manifest, 0, per_center=5, seed=0)) == 0


def test_sample_centers_underfull_center_named():
    manifest = _manifest_with_wsis(3, 4, role=Role.UNLABELED_TRAIN)  # 4 per center
    with pytest.raises(CatalogError, match="c[0-2]"):
        sample_centers(manifest, 3, per_center=5, seed=0)


def test_sample_centers_too_many_requested():
    manifest = _manifest_with_wsis(3, 4, role=Role.UNLABELED_TRAIN)
    with pytest.raises(CatalogError, match="only 3"):
        sample_centers(manifest, 4, per_center=1, seed=0)
