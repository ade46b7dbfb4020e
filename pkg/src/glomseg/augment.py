"""Weak and strong augmentation with the separation the SSL loop relies on.

Weak transforms are geometric (crop, 90-degree rotation, flips) and are
applied identically to image and mask, so a prediction made on the weak
view is a spatially valid target. Strong transforms touch pixel values
only (color jitter, grayscale, blur) plus optional CutMix, whose box is
recorded so pseudo-label targets can be mixed the same way.

All functions are pure in (input, spec, seed); images are HxWx3 uint8,
masks HxW uint8 in {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter


class AugmentError(Exception):
    pass


@dataclass(frozen=True)
class WeakAugSpec:
    crop_size: int = 1024
    rotation_choices: tuple[int, ...] = (0, 90, 180, 270)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5

    def __post_init__(self):
        if not all(r % 90 == 0 for r in self.rotation_choices):
            raise AugmentError("rotations must be multiples of 90 degrees")
        for p in (self.hflip_prob, self.vflip_prob):
            if not 0.0 <= p <= 1.0:
                raise AugmentError("flip probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class StrongAugSpec:
    jitter_brightness: float = 0.5
    jitter_contrast: float = 0.5
    jitter_saturation: float = 0.5
    jitter_hue: float = 0.25
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    cutmix_prob: float = 0.0
    cutmix_area_range: tuple[float, float] = (0.25, 0.5)

    def __post_init__(self):
        for name in ("jitter_prob", "grayscale_prob", "blur_prob", "cutmix_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise AugmentError(f"{name} must lie in [0, 1]")
        lo, hi = self.cutmix_area_range
        if not (0.0 < lo <= hi < 1.0):
            raise AugmentError("cutmix_area_range must lie within (0, 1)")


def paper_faithful_strong_spec() -> StrongAugSpec:
    """Color-jitter-centric strong set, CutMix off."""
    return StrongAugSpec(cutmix_prob=0.0)


def unimatch_default_strong_spec() -> StrongAugSpec:
    """Strong set with CutMix enabled at probability 0.5."""
    return StrongAugSpec(cutmix_prob=0.5)


@dataclass(frozen=True)
class GeometryRecord:
    """Enough to replay one weak geometric transform exactly."""

    crop_x: int
    crop_y: int
    crop_size: int
    rotation: int  # degrees, multiple of 90
    hflip: bool
    vflip: bool


@dataclass(frozen=True)
class CutMixBox:
    x0: int
    y0: int
    x1: int
    y1: int
    partner_index: int | None = None


@dataclass(frozen=True)
class AugmentedViews:
    weak_image: np.ndarray
    strong_image_1: np.ndarray
    strong_image_2: np.ndarray
    applied_geometry: GeometryRecord
    cutmix_box_1: CutMixBox | None = None
    cutmix_box_2: CutMixBox | None = None


# ---------------------------------------------------------------------------
# weak (geometric) augmentation
# ---------------------------------------------------------------------------

def apply_geometry(arr: np.ndarray, geo: GeometryRecord) -> np.ndarray:
    """Replay a recorded geometric transform on an image or mask array."""
    out = arr[geo.crop_y:geo.crop_y + geo.crop_size,
              geo.crop_x:geo.crop_x + geo.crop_size]
    k = (geo.rotation // 90) % 4
    if k:
        out = np.rot90(out, k=k)
    if geo.hflip:
        out = out[:, ::-1]
    if geo.vflip:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def weak_augment(image: np.ndarray, mask: np.ndarray | None, spec: WeakAugSpec,
                 seed: int) -> tuple[np.ndarray, np.ndarray | None, GeometryRecord]:
    """Random crop + rotation + flips, identical on image and mask."""
    h, w = image.shape[:2]
    if spec.crop_size > min(h, w):
        raise AugmentError(f"crop_size {spec.crop_size} exceeds image dims {(h, w)}")
    rng = np.random.default_rng(seed)
    geo = GeometryRecord(
        crop_x=int(rng.integers(0, w - spec.crop_size + 1)),
        crop_y=int(rng.integers(0, h - spec.crop_size + 1)),
        crop_size=spec.crop_size,
        rotation=int(rng.choice(spec.rotation_choices)),
        hflip=bool(rng.random() < spec.hflip_prob),
        vflip=bool(rng.random() < spec.vflip_prob),
    )
    out_img = apply_geometry(image, geo)
    out_mask = apply_geometry(mask, geo) if mask is not None else None
    return out_img, out_mask, geo


# ---------------------------------------------------------------------------
# strong (photometric) augmentation
# ---------------------------------------------------------------------------

def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(span, 1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span == 0, 0.0, (h / 6.0) % 1.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices = [
        np.stack([v, t, p], axis=-1), np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1), np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1), np.stack([v, p, q], axis=-1),
    ]
    out = np.zeros(hsv.shape, dtype=hsv.dtype)
    for k, choice in enumerate(choices):
        out = np.where(i[..., None] == k, choice, out)
    return out


_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def _jitter(img: np.ndarray, spec: StrongAugSpec, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation, hue on a float image in [0, 1]."""
    fb = rng.uniform(max(0.0, 1.0 - spec.jitter_brightness), 1.0 + spec.jitter_brightness)
    img = img * fb
    fc = rng.uniform(max(0.0, 1.0 - spec.jitter_contrast), 1.0 + spec.jitter_contrast)
    mean_gray = float((np.clip(img, 0, 1) @ _LUMA).mean())
    img = img * fc + mean_gray * (1.0 - fc)
    fs = rng.uniform(max(0.0, 1.0 - spec.jitter_saturation), 1.0 + spec.jitter_saturation)
    gray = np.clip(img, 0, 1) @ _LUMA
    img = img * fs + gray[..., None] * (1.0 - fs)
    dh = rng.uniform(-spec.jitter_hue, spec.jitter_hue)
    if spec.jitter_hue > 0:
        hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
        img = _hsv_to_rgb(hsv)
    return img


def sample_cutmix_box(height: int, width: int, area_range: tuple[float, float],
                      rng: np.random.Generator) -> CutMixBox:
    """Rectangle whose area fraction lies in ``area_range``, fully inside."""
    area_frac = rng.uniform(*area_range)
    # Aspect ratio jitter, clamped so the box fits.
    ratio = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    bh = int(round(np.sqrt(area_frac * height * width / ratio)))
    bw = int(round(bh * ratio))
    bh = int(np.clip(bh, 1, height))
    bw = int(np.clip(bw, 1, width))
    y0 = int(rng.integers(0, height - bh + 1))
    x0 = int(rng.integers(0, width - bw + 1))
    return CutMixBox(x0=x0, y0=y0, x1=x0 + bw, y1=y0 + bh)


def strong_augment(image: np.ndarray, spec: StrongAugSpec, seed: int,
                   cutmix_partner: np.ndarray | None = None
                   ) -> tuple[np.ndarray, CutMixBox | None]:
    """Photometric perturbation plus optional CutMix from a partner image.

    Outside any CutMix box only pixel values change, never positions;
    inside the box pixels come verbatim from the partner.
    """
    rng = np.random.default_rng(seed)
    img = image.astype(np.float64) / 255.0

    if rng.random() < spec.jitter_prob:
        img = _jitter(img, spec, rng)
    if rng.random() < spec.grayscale_prob:
        gray = np.clip(img, 0, 1) @ _LUMA
        img = np.repeat(gray[..., None], 3, axis=-1)
    if rng.random() < spec.blur_prob:
        sigma = rng.uniform(*spec.blur_sigma_range)
        # Replicate padding: reflect padding can push an edge pixel above
        # the kernel center, breaking the locality property.
        img = gaussian_filter(img, sigma=(sigma, sigma, 0.0), mode="nearest")

    out = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)

    box = None
    if rng.random() < spec.cutmix_prob:
        if cutmix_partner is None:
            raise AugmentError("cutmix triggered but no partner image supplied")
        if cutmix_partner.shape != image.shape:
            raise AugmentError(
                f"cutmix partner shape {cutmix_partner.shape} != image shape {image.shape}"
            )
        h, w = out.shape[:2]
        box = sample_cutmix_box(h, w, spec.cutmix_area_range, rng)
        out[box.y0:box.y1, box.x0:box.x1] = cutmix_partner[box.y0:box.y1, box.x0:box.x1]
    return out, box


def make_views(image: np.ndarray, spec_w: WeakAugSpec, spec_s: StrongAugSpec,
               seeds: tuple[int, int, int],
               partner: np.ndarray | None = None,
               partner_index: int | None = None) -> AugmentedViews:
    """One weak view and two strong views sharing the weak geometry.

    ``partner`` must already be geometry-matched (typically the weak view
    of another sample in the same batch).
    """
    s0, s1, s2 = seeds
    if s1 == s2:
        raise AugmentError("the two strong streams need distinct seeds")
    weak_img, _, geo = weak_augment(image, None, spec_w, s0)
    strong1, box1 = strong_augment(weak_img, spec_s, s1, cutmix_partner=partner)
    strong2, box2 = strong_augment(weak_img, spec_s, s2, cutmix_partner=partner)
    if box1 is not None:
        box1 = CutMixBox(box1.x0, box1.y0, box1.x1, box1.y1, partner_index)
    if box2 is not None:
        box2 = CutMixBox(box2.x0, box2.y0, box2.x1, box2.y1, partner_index)
    return AugmentedViews(weak_image=weak_img, strong_image_1=strong1,
                          strong_image_2=strong2, applied_geometry=geo,
                          cutmix_box_1=box1, cutmix_box_2=box2)
