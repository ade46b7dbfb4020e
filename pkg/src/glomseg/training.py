"""Supervised, FixMatch and UniMatch training objectives and loop.

The unsupervised objectives share one primitive: cross-entropy against
argmax pseudo-labels from the weak view, averaged over pixels whose weak
confidence clears the threshold (0 when none do). FixMatch trains one
strong stream against that target; UniMatch adds a second strong stream
and a feature-perturbed stream with its own weight.

One epoch is one pass over the labeled loader; the unlabeled loader is
cycled independently. Random streams for labeled batching, unlabeled
batching and augmentation are separated per seed so that turning the
unsupervised term off reproduces the supervised trajectory exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import StrongAugSpec, WeakAugSpec, strong_augment, weak_augment
from .catalog import DatasetManifest, PatchRecord, Role, load_image, load_mask
from .models import ModelConfig, forward_feature_perturbed, save_checkpoint


class TrainError(Exception):
    pass


class TrainingDiverged(TrainError):
    """Non-finite loss; message carries the step and component losses."""


METHODS = ("supervised", "fixmatch", "unimatch")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "supervised"
    lr: float = 1e-4
    momentum: float = 0.9
    batch_size_labeled: int = 10
    batch_size_unlabeled: int = 0  # 0 means: same as labeled
    epochs: int = 30
    tau: float = 0.95
    lambda_u: float = 1.0
    w_fp: float = 0.5
    lr_schedule: str = "constant"  # constant | poly
    poly_power: float = 0.9
    seed: int = 42
    dice_loss_weight: float = 0.0  # optional additive overlap term, off by default
    val_every: int = 1
    save_every: int = 0  # intermediate checkpoints every n epochs; 0 = final only

    def __post_init__(self):
        if self.method not in METHODS:
            raise TrainError(f"unknown method {self.method!r}; known: {METHODS}")
        if not 0.0 < self.tau <= 1.0:
            raise TrainError("tau must lie in (0, 1]")
        if self.lambda_u < 0:
            raise TrainError("lambda_u must be >= 0")
        if self.lr <= 0 or self.momentum < 0:
            raise TrainError("lr must be positive and momentum non-negative")
        if self.epochs < 1 or self.batch_size_labeled < 1:
            raise TrainError("epochs and batch sizes must be >= 1")
        if self.lr_schedule not in ("constant", "poly"):
            raise TrainError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def unlabeled_batch(self) -> int:
        return self.batch_size_unlabeled or self.batch_size_labeled


@dataclass
class PseudoLabelBatch:
    labels: torch.Tensor  # B x H x W int64, argmax of the weak softmax
    confidence_mask: torch.Tensor  # B x H x W bool, max prob >= tau

    @property
    def retention(self) -> float:
        return float(self.confidence_mask.to(torch.float64).mean())


@dataclass
class TrainHistory:
    sup_loss: list[float] = field(default_factory=list)
    unsup_loss: list[float] = field(default_factory=list)
    retention: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_clock: float = 0.0

    def __len__(self) -> int:
        return len(self.sup_loss)


def history_to_csv(history: TrainHistory, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,sup_loss,unsup_loss,retention,lr"]
    for i in range(len(history)):
        lines.append(f"{i},{history.sup_loss[i]!r},{history.unsup_loss[i]!r},"
                     f"{history.retention[i]!r},{history.lr[i]!r}")
    path.write_text("\n".join(lines) + "\n")


@dataclass
class Checkpoint:
    model: torch.nn.Module
    model_config: ModelConfig
    path: Path | None = None  # final-epoch file, when persisted
    best_path: Path | None = None


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_logits_vs_targets(logits: torch.Tensor, targets: torch.Tensor) -> None:
    if logits.ndim != 4:
        raise TrainError(f"logits must be BxCxHxW, got shape {tuple(logits.shape)}")
    if targets.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise TrainError(
            f"target shape {tuple(targets.shape)} incompatible with logits "
            f"{tuple(logits.shape)}"
        )


def supervised_loss(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy over all pixels."""
    _check_logits_vs_targets(logits, masks)
    return F.cross_entropy(logits, masks.long())


def soft_dice_loss(logits: torch.Tensor, masks: torch.Tensor,
                   eps: float = 1.0) -> torch.Tensor:
    """1 - soft overlap of the positive class, for the optional additive term."""
    _check_logits_vs_targets(logits, masks)
    probs = logits.softmax(dim=1)[:, 1]
    target = (masks == 1).to(probs.dtype)
    inter = (probs * target).sum()
    return 1.0 - (2.0 * inter + eps) / (probs.sum() + target.sum() + eps)


def make_pseudo_labels(weak_logits: torch.Tensor, tau: float) -> PseudoLabelBatch:
    """Argmax labels plus a confidence mask; no gradient flows through."""
    if not 0.0 < tau <= 1.0:
        raise TrainError("tau must lie in (0, 1]")
    probs = weak_logits.detach().softmax(dim=1)
    conf, labels = probs.max(dim=1)
    return PseudoLabelBatch(labels=labels, confidence_mask=conf >= tau)


def masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                         mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy averaged over masked pixels; 0 when the mask is empty."""
    _check_logits_vs_targets(logits, labels)
    if mask.shape != labels.shape:
        raise TrainError(f"mask shape {tuple(mask.shape)} != labels {tuple(labels.shape)}")
    weights = mask.to(logits.dtype)
    denom = weights.sum()
    if denom.item() == 0:
        return logits.new_zeros(())
    per_pixel = F.cross_entropy(logits, labels.long(), reduction="none")
    return (per_pixel * weights).sum() / denom


def fixmatch_unsup_loss(weak_logits: torch.Tensor, strong_logits: torch.Tensor,
                        tau: float) -> torch.Tensor:
    """Strong-view cross-entropy against confident weak pseudo-labels."""
    if weak_logits.shape != strong_logits.shape:
        raise TrainError(
            f"weak {tuple(weak_logits.shape)} and strong {tuple(strong_logits.shape)} "
            "logits must share shape"
        )
    pseudo = make_pseudo_labels(weak_logits, tau)
    return masked_cross_entropy(strong_logits, pseudo.labels, pseudo.confidence_mask)


def unimatch_unsup_loss(weak_logits: torch.Tensor, fp_logits: torch.Tensor,
                        strong1_logits: torch.Tensor, strong2_logits: torch.Tensor,
                        tau: float, w_fp: float) -> torch.Tensor:
    """Feature-perturbed stream plus the mean of two strong streams."""
    for name, t in (("fp", fp_logits), ("strong1", strong1_logits),
                    ("strong2", strong2_logits)):
        if t.shape != weak_logits.shape:
            raise TrainError(f"{name} logits shape {tuple(t.shape)} != weak "
                             f"{tuple(weak_logits.shape)}")
    pseudo = make_pseudo_labels(weak_logits, tau)
    loss_fp = masked_cross_entropy(fp_logits, pseudo.labels, pseudo.confidence_mask)
    loss_s1 = masked_cross_entropy(strong1_logits, pseudo.labels, pseudo.confidence_mask)
    loss_s2 = masked_cross_entropy(strong2_logits, pseudo.labels, pseudo.confidence_mask)
    return w_fp * loss_fp + 0.5 * (loss_s1 + loss_s2)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def to_model_input(images: list[np.ndarray]) -> torch.Tensor:
    """Stack HxWx3 uint8 arrays into a B x 3 x H x W float tensor in [0, 1]."""
    batch = np.stack(images).astype(np.float32) / 255.0
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()


class _PatchCache:
    """Per-run decoded-image cache; fixture-scale sets fit in memory."""

    def __init__(self):
        self._images: dict[str, np.ndarray] = {}
        self._masks: dict[str, np.ndarray] = {}

    def image(self, rec: PatchRecord) -> np.ndarray:
        key = str(rec.image_path)
        if key not in self._images:
            self._images[key] = load_image(rec.image_path)
        return self._images[key]

    def mask(self, rec: PatchRecord) -> np.ndarray:
        if rec.mask_path is None:
            raise TrainError(f"record {rec.patch_id} has no mask")
        key = str(rec.mask_path)
        if key not in self._masks:
            self._masks[key] = load_mask(rec.mask_path)
        return self._masks[key]


class _CycledSampler:
    """Yields batches of indices, reshuffling whenever the pool runs dry."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n = n
        self.batch = batch
        self.rng = rng
        self._order: list[int] = []

    def next_batch(self) -> list[int]:
        while len(self._order) < self.batch:
            self._order.extend(self.rng.permutation(self.n).tolist())
        out, self._order = self._order[:self.batch], self._order[self.batch:]
        return out


def _mix_by_box(base: torch.Tensor, partner: torch.Tensor, box) -> torch.Tensor:
    out = base.clone()
    out[..., box.y0:box.y1, box.x0:box.x1] = partner[..., box.y0:box.y1, box.x0:box.x1]
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(model: torch.nn.Module, labeled: DatasetManifest,
          unlabeled: DatasetManifest | None, cfg: TrainConfig,
          weak_spec: WeakAugSpec, strong_spec: StrongAugSpec,
          val_manifest: DatasetManifest | None = None,
          out_dir: Path | str | None = None) -> tuple[Checkpoint, TrainHistory]:
    """Run the configured objective; returns the checkpoint and history.

    With ``out_dir`` set, writes ``epoch_{n}.ckpt`` for the final epoch
    (plus every ``save_every`` epochs), ``best.ckpt`` when a validation
    manifest is given, and ``history.csv``.
    """
    if cfg.method != "supervised" and cfg.lambda_u > 0:
        if unlabeled is None or len(unlabeled) == 0:
            raise TrainError(f"method {cfg.method} requires an unlabeled manifest")
        if unlabeled.role != Role.UNLABELED_TRAIN:
            raise TrainError("unlabeled manifest must have the unlabeled_train role")
        if cfg.unlabeled_batch > len(unlabeled):
            raise TrainError("unlabeled batch size exceeds unlabeled dataset size")
    if labeled.role != Role.LABELED_TRAIN:
        raise TrainError("labeled manifest must have the labeled_train role")
    if cfg.batch_size_labeled > len(labeled):
        raise TrainError("labeled batch size exceeds labeled dataset size")

    # Skipping the unlabeled branch when its weight is zero keeps the
    # parameter trajectory bit-identical to plain supervised training.
    use_unsup = cfg.method != "supervised" and cfg.lambda_u > 0

    torch.manual_seed(cfg.seed)
    rng_labeled = np.random.default_rng([cfg.seed, 0])
    rng_unlabeled = np.random.default_rng([cfg.seed, 1])

    cache = _PatchCache()
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    steps_per_epoch = (len(labeled) + cfg.batch_size_labeled - 1) // cfg.batch_size_labeled
    total_iters = steps_per_epoch * cfg.epochs
    unlabeled_sampler = (_CycledSampler(len(unlabeled), cfg.unlabeled_batch, rng_unlabeled)
                         if use_unsup else None)

    out_dir = Path(out_dir) if out_dir is not None else None
    history = TrainHistory()
    best_dice = -1.0
    best_path = None
    final_path = None
    start = time.monotonic()
    global_step = 0

    for epoch in range(cfg.epochs):
        order = rng_labeled.permutation(len(labeled)).tolist()
        epoch_sup, epoch_unsup, epoch_ret = [], [], []

        for lo in range(0, len(order), cfg.batch_size_labeled):
            if cfg.lr_schedule == "poly":
                lr_now = cfg.lr * (1.0 - global_step / total_iters) ** cfg.poly_power
            else:
                lr_now = cfg.lr
            for group in optimizer.param_groups:
                group["lr"] = lr_now

            batch_idx = order[lo:lo + cfg.batch_size_labeled]
            imgs, masks = [], []
            for i in batch_idx:
                rec = labeled.records[i]
                img, mask, _ = weak_augment(cache.image(rec), cache.mask(rec),
                                            weak_spec, int(rng_labeled.integers(2**63)))
                imgs.append(img)
                masks.append(mask)
            x_l = to_model_input(imgs)
            y_l = torch.from_numpy(np.stack(masks)).long()

            model.train()
            logits_l = model(x_l)
            sup = supervised_loss(logits_l, y_l)
            if cfg.dice_loss_weight > 0:
                sup = sup + cfg.dice_loss_weight * soft_dice_loss(logits_l, y_l)

            unsup = x_l.new_zeros(())
            retention = 0.0
            if use_unsup:
                unsup, retention = _unsupervised_step(
                    model, unlabeled, unlabeled_sampler, cache, cfg,
                    weak_spec, strong_spec, rng_unlabeled)

            total = sup + cfg.lambda_u * unsup
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at step {global_step}: "
                    f"sup={float(sup.detach())!r} unsup={float(unsup.detach())!r}"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            epoch_sup.append(float(sup.detach()))
            epoch_unsup.append(float(unsup.detach()))
            epoch_ret.append(retention)
            global_step += 1

        history.sup_loss.append(float(np.mean(epoch_sup)))
        history.unsup_loss.append(float(np.mean(epoch_unsup)))
        history.retention.append(float(np.mean(epoch_ret)))
        history.lr.append(lr_now)

        if val_manifest is not None and (epoch + 1) % max(cfg.val_every, 1) == 0:
            dice = _quick_dice(model, val_manifest, cache)
            if dice > best_dice:
                best_dice = dice
                if out_dir is not None:
                    best_path = out_dir / "best.ckpt"
                    save_checkpoint(model, best_path)

        if out_dir is not None:
            is_final = epoch == cfg.epochs - 1
            if is_final or (cfg.save_every and (epoch + 1) % cfg.save_every == 0):
                path = out_dir / f"epoch_{epoch}.ckpt"
                save_checkpoint(model, path)
                if is_final:
                    final_path = path

    history.wall_clock = time.monotonic() - start
    if out_dir is not None:
        history_to_csv(history, out_dir / "history.csv")
        if best_path is None:
            best_path = out_dir / "best.ckpt"
            save_checkpoint(model, best_path)

    ckpt = Checkpoint(model=model, model_config=model.config,
                      path=final_path, best_path=best_path)
    return ckpt, history


def _unsupervised_step(model, unlabeled, sampler, cache, cfg,
                       weak_spec, strong_spec, rng) -> tuple[torch.Tensor, float]:
    """One unlabeled batch: views, pseudo-labels, per-method streams."""
    idx = sampler.next_batch()
    n = len(idx)
    weak_imgs = []
    for i in idx:
        img, _, _ = weak_augment(cache.image(unlabeled.records[i]), None,
                                 weak_spec, int(rng.integers(2**63)))
        weak_imgs.append(img)

    # Shift-by-one derangement pairs each sample with a batch partner.
    n_strong = 1 if cfg.method == "fixmatch" else 2
    strong_views: list[list[np.ndarray]] = [[] for _ in range(n_strong)]
    boxes: list[list] = [[] for _ in range(n_strong)]
    for i in range(n):
        partner = weak_imgs[(i + 1) % n] if n > 1 else None
        for s in range(n_strong):
            img, box = strong_augment(weak_imgs[i], strong_spec,
                                      int(rng.integers(2**63)), cutmix_partner=partner)
            strong_views[s].append(img)
            boxes[s].append(box)

    # Train-mode forward keeps batch-norm on batch statistics, which keeps
    # early pseudo-label confidence calibrated instead of saturating.
    x_weak = to_model_input(weak_imgs)
    model.train()
    with torch.no_grad():
        weak_logits = model(x_weak)
    pseudo = make_pseudo_labels(weak_logits, cfg.tau)

    def stream_loss(view_imgs, view_boxes):
        logits = model(to_model_input(view_imgs))
        labels, conf = pseudo.labels, pseudo.confidence_mask
        for i, box in enumerate(view_boxes):
            if box is None:
                continue
            j = (i + 1) % n
            labels = labels.clone()
            conf = conf.clone()
            labels[i] = _mix_by_box(labels[i], pseudo.labels[j], box)
            conf[i] = _mix_by_box(conf[i], pseudo.confidence_mask[j], box)
        return masked_cross_entropy(logits, labels, conf)

    if cfg.method == "fixmatch":
        unsup = stream_loss(strong_views[0], boxes[0])
    else:
        fp_logits = forward_feature_perturbed(model, x_weak, model.config.drop_rate_fp,
                                              seed=int(rng.integers(2**63)))
        loss_fp = masked_cross_entropy(fp_logits, pseudo.labels, pseudo.confidence_mask)
        loss_s1 = stream_loss(strong_views[0], boxes[0])
        loss_s2 = stream_loss(strong_views[1], boxes[1])
        unsup = cfg.w_fp * loss_fp + 0.5 * (loss_s1 + loss_s2)
    return unsup, pseudo.retention


def _quick_dice(model, manifest: DatasetManifest, cache: _PatchCache) -> float:
    """Micro dice over a validation manifest, for best-checkpoint tracking."""
    model.eval()
    tp = fp = fn = 0
    with torch.no_grad():
        for rec in manifest.records:
            pred = model(to_model_input([cache.image(rec)])).argmax(dim=1)[0].numpy()
            gt = cache.mask(rec)
            tp += int(((pred == 1) & (gt == 1)).sum())
            fp += int(((pred == 1) & (gt == 0)).sum())
            fn += int(((pred == 0) & (gt == 1)).sum())
    return 2.0 * tp / (2.0 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
