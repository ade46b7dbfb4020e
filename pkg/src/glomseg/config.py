"""Run configuration: flat dotted-key text files, env and CLI overrides.

The format is intentionally diff-friendly: one ``key = value`` pair per
line, ``#`` comments, no nesting syntax. Every key has a documented
default below; resolution order is defaults < file < environment
(``GLOMSEG_`` prefix, dots as double underscores) < explicit overrides.
The resolved snapshot written into a run directory parses back to an
identical configuration.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .augment import StrongAugSpec, WeakAugSpec
from .models import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "GLOMSEG_"


class ConfigError(Exception):
    pass


def _parse_ints(text: str) -> tuple[int, ...] | None:
    text = text.strip()
    if not text:
        return None
    return tuple(int(tok) for tok in text.split(","))


def _format_ints(value) -> str:
    return "" if value is None else ",".join(str(v) for v in value)


_PARSERS = {
    "str": (lambda s: s, lambda v: str(v)),
    "int": (int, str),
    "float": (float, repr),
    "ints": (_parse_ints, _format_ints),
}

# key -> (type name, default, help)
CONFIG_SCHEMA: dict[str, tuple[str, object, str]] = {
    "run_id": ("str", "run", "unique run name under output_dir"),
    "output_dir": ("str", "runs", "root directory for run outputs"),
    "data.labeled_manifest": ("str", "", "JSONL manifest of labeled training patches"),
    "data.unlabeled_manifest": ("str", "", "JSONL manifest of unlabeled training patches"),
    "data.val_manifest": ("str", "", "JSONL manifest used for best-checkpoint tracking"),
    "data.eval_manifests": ("str", "", "semicolon-separated name=path evaluation manifests"),
    "model.arch": ("str", "segformer", "segformer | att_unet"),
    "model.variant": ("str", "b1", "encoder scale (b0..b5, tiny, small); empty for custom dims"),
    "model.num_classes": ("int", 2, "output classes (background + glomerulus)"),
    "model.input_channels": ("int", 3, "input channels"),
    "model.embed_dims": ("ints", None, "custom per-stage widths, comma-separated"),
    "model.depths": ("ints", None, "custom per-stage block counts"),
    "model.num_heads": ("ints", None, "custom per-stage attention heads"),
    "model.decoder_dim": ("int", 0, "decoder width; 0 uses the variant default"),
    "model.drop_rate_fp": ("float", 0.5, "channel-drop rate of the feature-perturbation stream"),
    "model.unet_base_channels": ("int", 128, "attention U-Net base width"),
    "model.init_weights": ("str", "", "optional local weights file loaded at build time"),
    "train.method": ("str", "supervised", "supervised | fixmatch | unimatch"),
    "train.lr": ("float", 0.0001, "initial learning rate"),
    "train.momentum": ("float", 0.9, "SGD momentum"),
    "train.batch_size_labeled": ("int", 10, "labeled batch size"),
    "train.batch_size_unlabeled": ("int", 0, "unlabeled batch size; 0 = same as labeled"),
    "train.epochs": ("int", 30, "passes over the labeled loader"),
    "train.tau": ("float", 0.95, "pseudo-label confidence threshold"),
    "train.lambda_u": ("float", 1.0, "unsupervised loss weight"),
    "train.w_fp": ("float", 0.5, "feature-perturbation stream weight"),
    "train.lr_schedule": ("str", "constant", "constant | poly"),
    "train.poly_power": ("float", 0.9, "poly schedule exponent"),
    "train.seed": ("int", 42, "seed for init, batching and augmentation"),
    "train.dice_loss_weight": ("float", 0.0, "optional additive soft-overlap loss weight"),
    "train.val_every": ("int", 1, "validate every n epochs when a val manifest is set"),
    "train.save_every": ("int", 0, "intermediate checkpoints every n epochs; 0 = final only"),
    "augment.weak.crop_size": ("int", 1024, "weak-view crop size"),
    "augment.weak.rotation_choices": ("ints", (0, 90, 180, 270), "rotation menu, degrees"),
    "augment.weak.hflip_prob": ("float", 0.5, "horizontal flip probability"),
    "augment.weak.vflip_prob": ("float", 0.5, "vertical flip probability"),
    "augment.strong.jitter_brightness": ("float", 0.5, "max brightness delta"),
    "augment.strong.jitter_contrast": ("float", 0.5, "max contrast delta"),
    "augment.strong.jitter_saturation": ("float", 0.5, "max saturation delta"),
    "augment.strong.jitter_hue": ("float", 0.25, "max hue delta"),
    "augment.strong.jitter_prob": ("float", 0.8, "color jitter probability"),
    "augment.strong.grayscale_prob": ("float", 0.2, "grayscale probability"),
    "augment.strong.blur_prob": ("float", 0.5, "gaussian blur probability"),
    "augment.strong.blur_sigma_lo": ("float", 0.1, "blur sigma lower bound"),
    "augment.strong.blur_sigma_hi": ("float", 2.0, "blur sigma upper bound"),
    "augment.strong.cutmix_prob": ("float", 0.0, "CutMix probability (strong streams only)"),
    "augment.strong.cutmix_area_lo": ("float", 0.25, "CutMix area fraction lower bound"),
    "augment.strong.cutmix_area_hi": ("float", 0.5, "CutMix area fraction upper bound"),
    "eval.aggregation": ("str", "micro", "micro | macro"),
    "ablate.fractions": ("str", "1/16,1/8,1/4,1/2", "labeled fractions for the fraction axis"),
    "ablate.center_counts": ("str", "1,3,5", "center counts for the centers axis"),
    "ablate.per_center": ("int", 100, "unlabeled patches sampled per center"),
    "ablate.backbones": ("str", "b0,b1", "encoder variants for the backbone axis"),
}


@dataclass
class RunConfig:
    """Resolved configuration; values are already typed."""

    values: dict[str, object]

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        if key not in CONFIG_SCHEMA:
            raise ConfigError(
                f"unknown config key {key!r}; valid keys: {', '.join(sorted(CONFIG_SCHEMA))}"
            )
        type_name = CONFIG_SCHEMA[key][0]
        parse = _PARSERS[type_name][0]
        try:
            self.values[key] = parse(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc

    # -- builders -----------------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            arch=self["model.arch"],
            variant=self["model.variant"] or None,
            num_classes=self["model.num_classes"],
            input_channels=self["model.input_channels"],
            embed_dims=self["model.embed_dims"],
            depths=self["model.depths"],
            num_heads=self["model.num_heads"],
            decoder_dim=self["model.decoder_dim"] or None,
            drop_rate_fp=self["model.drop_rate_fp"],
            unet_base_channels=self["model.unet_base_channels"],
            init_weights=self["model.init_weights"] or None,
        )

    def train_config(self, method: str | None = None) -> TrainConfig:
        return TrainConfig(
            method=method or self["train.method"],
            lr=self["train.lr"],
            momentum=self["train.momentum"],
            batch_size_labeled=self["train.batch_size_labeled"],
            batch_size_unlabeled=self["train.batch_size_unlabeled"],
            epochs=self["train.epochs"],
            tau=self["train.tau"],
            lambda_u=self["train.lambda_u"],
            w_fp=self["train.w_fp"],
            lr_schedule=self["train.lr_schedule"],
            poly_power=self["train.poly_power"],
            seed=self["train.seed"],
            dice_loss_weight=self["train.dice_loss_weight"],
            val_every=self["train.val_every"],
            save_every=self["train.save_every"],
        )

    def weak_spec(self) -> WeakAugSpec:
        return WeakAugSpec(
            crop_size=self["augment.weak.crop_size"],
            rotation_choices=self["augment.weak.rotation_choices"] or (0,),
            hflip_prob=self["augment.weak.hflip_prob"],
            vflip_prob=self["augment.weak.vflip_prob"],
        )

    def strong_spec(self) -> StrongAugSpec:
        return StrongAugSpec(
            jitter_brightness=self["augment.strong.jitter_brightness"],
            jitter_contrast=self["augment.strong.jitter_contrast"],
            jitter_saturation=self["augment.strong.jitter_saturation"],
            jitter_hue=self["augment.strong.jitter_hue"],
            jitter_prob=self["augment.strong.jitter_prob"],
            grayscale_prob=self["augment.strong.grayscale_prob"],
            blur_prob=self["augment.strong.blur_prob"],
            blur_sigma_range=(self["augment.strong.blur_sigma_lo"],
                              self["augment.strong.blur_sigma_hi"]),
            cutmix_prob=self["augment.strong.cutmix_prob"],
            cutmix_area_range=(self["augment.strong.cutmix_area_lo"],
                               self["augment.strong.cutmix_area_hi"]),
        )

    def eval_manifest_specs(self) -> list[tuple[str, str]]:
        """Parsed ``name=path`` pairs from data.eval_manifests."""
        raw = self["data.eval_manifests"]
        pairs = []
        for chunk in filter(None, (c.strip() for c in raw.split(";"))):
            if "=" not in chunk:
                raise ConfigError(f"eval manifest entry {chunk!r} is not name=path")
            name, path = chunk.split("=", 1)
            pairs.append((name.strip(), path.strip()))
        return pairs

    def ablate_fractions(self) -> list[Fraction]:
        return [Fraction(tok.strip()) for tok in self["ablate.fractions"].split(",") if tok.strip()]

    def ablate_center_counts(self) -> list[int]:
        return [int(tok) for tok in self["ablate.center_counts"].split(",") if tok.strip()]

    def ablate_backbones(self) -> list[str]:
        return [tok.strip() for tok in self["ablate.backbones"].split(",") if tok.strip()]

    # -- persistence --------------------------------------------------------

    def snapshot_text(self) -> str:
        lines = ["# resolved run configuration"]
        for key in sorted(self.values):
            type_name = CONFIG_SCHEMA[key][0]
            fmt = _PARSERS[type_name][1]
            lines.append(f"{key} = {fmt(self.values[key])}")
        return "\n".join(lines) + "\n"


def default_config() -> RunConfig:
    return RunConfig(values={k: v for k, (_, v, _) in CONFIG_SCHEMA.items()})


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or default_config()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        cfg.set(key, value)
    return cfg


def apply_env_overrides(cfg: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    for key in CONFIG_SCHEMA:
        env_key = ENV_PREFIX + key.upper().replace(".", "__")
        if env_key in environ:
            cfg.set(key, environ[env_key])
    return cfg


def load_config(path: Path | str | None, overrides: list[str] | None = None,
                environ=None) -> RunConfig:
    """defaults < file < env < explicit key=value overrides."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cfg = parse_config_text(path.read_text(), base=cfg)
    apply_env_overrides(cfg, environ=environ)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    return cfg
