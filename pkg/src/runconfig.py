"""
plaincnn Run Configuration
Reads a JSON run config, applies dotted `section.key=value` overrides,
fills every missing field from the dataset preset, and turns the result
into the objects the training stack consumes.

A minimal config only names the dataset and its files:

    {"dataset": {"name": "mnist", "train_images": "...", ...}}
"""

import json
import os

from augment import AUGMENT_PRESETS, AugmentConfig
from data import concat_datasets, load_cifar, load_idx, load_raw, load_stl10
from errors import ConfigError
from nn import PRESETS, DropoutParadigm, build_preset
from train import TRAIN_PRESETS, EarlyStopConfig, TrainConfig


# Path keys each dataset needs; `extra_manifest` is the optional second SVHN training set.
DATASET_PATH_KEYS = {
    "mnist": ("train_images", "train_labels", "test_images", "test_labels"),
    "cifar10": ("dir",),
    "cifar100": ("dir",),
    "stl10": ("dir",),
    "svhn": ("train_manifest", "test_manifest"),
}
OPTIONAL_PATH_KEYS = ("extra_manifest",)
ALL_PATH_KEYS = sorted({k for keys in DATASET_PATH_KEYS.values() for k in keys} | set(OPTIONAL_PATH_KEYS))

SECTION_KEYS = {
    "dataset": {"name", "val_fraction", *ALL_PATH_KEYS},
    "model": {"preset", "paradigm", "spatial_rate", "regular_rate", "placement", "pool_dropout", "fc_width", "widths"},
    "augment": set(AugmentConfig.__dataclass_fields__),
    "train": {"learning_rate", "batch_size", "max_epochs", "seed", "baseline_acc", "patience", "min_epochs", "workers"},
    "output": {"directory", "timing"},
}

# Pool-stage rate used when a paradigm with pool dropout is picked on a
# preset whose own paradigm has none.
DEFAULT_SPATIAL_RATE = 0.125


def preset_defaults(name):
    """Complete config for a dataset preset, paths excluded."""
    if name not in PRESETS:
        raise ConfigError(f"Unknown dataset {name!r}; expected one of {', '.join(PRESETS)}")
    paradigm = PRESETS[name]["paradigm"]
    train_preset = TRAIN_PRESETS[name]
    early = EarlyStopConfig(baseline_acc=train_preset["baseline_acc"])
    train = TrainConfig(batch_size=train_preset["batch_size"], early_stop=early)
    return {
        "dataset": {"name": name, "val_fraction": train.val_fraction},
        "model": {
            "preset": name,
            "paradigm": paradigm.kind,
            "spatial_rate": paradigm.spatial_rate if paradigm.at_pools else DEFAULT_SPATIAL_RATE,
            "regular_rate": paradigm.regular_rate,
            "placement": paradigm.placement,
            "pool_dropout": paradigm.pool_mode,
            "fc_width": PRESETS[name]["fc_width"],
            "widths": list(PRESETS[name]["widths"]),
        },
        "augment": AugmentConfig(**AUGMENT_PRESETS[name]).to_dict(),
        "train": {
            "learning_rate": train.learning_rate,
            "batch_size": train.batch_size,
            "max_epochs": train.max_epochs,
            "seed": train.seed,
            "baseline_acc": early.baseline_acc,
            "patience": early.patience,
            "min_epochs": early.min_epochs,
            "workers": train.workers,
        },
        "output": {"directory": f"runs/{name}", "timing": False},
    }


# =============================================================================
# PARSING
# =============================================================================

def parse_override(text):
    """'section.key=value' -> (section, key, value). The value is JSON if it parses, else the raw string."""
    if "=" not in text:
        raise ConfigError(f"Override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"Override key {path!r} must be section.key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts[0], parts[1], value


def apply_overrides(raw, overrides):
    for text in overrides or ():
        section, key, value = parse_override(text)
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"Section {section!r} must be an object")
        raw[section][key] = value
    return raw


def check_keys(raw):
    """Reject unknown sections and keys."""
    if not isinstance(raw, dict):
        raise ConfigError("Config must be a JSON object")
    for section, body in raw.items():
        if section not in SECTION_KEYS:
            raise ConfigError(f"Unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"Section {section!r} must be an object")
        unknown = sorted(set(body) - SECTION_KEYS[section])
        if unknown:
            raise ConfigError(f"Unknown key(s) in {section}: {', '.join(unknown)}")


def default_pool_dropout(preset, kind):
    """
    Pool-stage dropout mode when the config leaves it unset: the preset's own
    mode while its paradigm is kept, channel-wise dropout for any other paradigm.
    """
    own = PRESETS.get(preset, {}).get("paradigm")
    if own is not None and own.kind == kind:
        return own.pool_mode
    return "spatial"


def resolve_config(raw, overrides=(), base_dir="."):
    """
    Merge a raw config dict (plus overrides) over its preset defaults.
    Relative dataset paths and the output directory are made absolute
    against base_dir.
    """
    raw = apply_overrides(json.loads(json.dumps(raw)), overrides)
    check_keys(raw)
    name = raw.get("dataset", {}).get("name")
    if not name:
        raise ConfigError("dataset.name is required")

    cfg = preset_defaults(name)
    for section, body in raw.items():
        cfg[section].update(body)
    if "pool_dropout" not in raw.get("model", {}):
        cfg["model"]["pool_dropout"] = default_pool_dropout(cfg["model"]["preset"], cfg["model"]["paradigm"])

    for key in ALL_PATH_KEYS:
        value = cfg["dataset"].get(key)
        if value is not None:
            cfg["dataset"][key] = os.path.normpath(os.path.join(base_dir, value))
    cfg["output"]["directory"] = os.path.normpath(os.path.join(base_dir, cfg["output"]["directory"]))
    return cfg


def load_run_config(path, overrides=()):
    """Read a JSON config file and resolve it; paths are relative to the file's directory."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: config file not found") from e
    return resolve_config(raw, overrides, base_dir=os.path.dirname(os.path.abspath(path)))


# =============================================================================
# BUILDERS
# =============================================================================

def build_spec(cfg):
    """ArchitectureSpec for the model section."""
    m = cfg["model"]
    try:
        paradigm = DropoutParadigm(
            kind=m["paradigm"],
            spatial_rate=float(m["spatial_rate"]),
            regular_rate=float(m["regular_rate"]),
            placement=m["placement"],
            pool_mode=m["pool_dropout"],
        )
        return build_preset(m["preset"], paradigm=paradigm, widths=m["widths"], fc_width=m["fc_width"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model: {e}") from e


def build_augment(cfg):
    try:
        return AugmentConfig(**cfg["augment"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"augment: {e}") from e


def build_train(cfg):
    t = cfg["train"]
    try:
        early = EarlyStopConfig(
            baseline_acc=float(t["baseline_acc"]),
            patience=int(t["patience"]),
            min_epochs=int(t["min_epochs"]),
        )
        return TrainConfig(
            learning_rate=float(t["learning_rate"]),
            batch_size=int(t["batch_size"]),
            max_epochs=int(t["max_epochs"]),
            seed=int(t["seed"]),
            val_fraction=float(cfg["dataset"]["val_fraction"]),
            early_stop=early,
            workers=int(t["workers"]),
            timing=bool(cfg["output"]["timing"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from e


def load_datasets(cfg, verbose=False):
    """Return (train_full, test) for the configured dataset, before any validation split."""
    d = cfg["dataset"]
    name = d["name"]
    missing = [k for k in DATASET_PATH_KEYS[name] if not d.get(k)]
    if missing:
        raise ConfigError(f"dataset {name} needs path key(s): {', '.join(missing)}")
    factor = build_augment(cfg).rescale

    if name == "mnist":
        train = load_idx(d["train_images"], d["train_labels"], name="mnist", factor=factor)
        test = load_idx(d["test_images"], d["test_labels"], name="mnist-test", factor=factor)
    elif name in ("cifar10", "cifar100"):
        train, test = load_cifar(d["dir"], variant=name, verbose=verbose, factor=factor)
    elif name == "stl10":
        train, test = load_stl10(d["dir"], verbose=verbose, factor=factor)
    else:
        train = load_raw(d["train_manifest"], factor)
        test = load_raw(d["test_manifest"], factor)
        if d.get("extra_manifest"):
            train = concat_datasets(train, load_raw(d["extra_manifest"], factor), name=f"{name}-train+extra")

    if verbose:
        print(f"Loaded {name}: {len(train):,} train / {len(test):,} test samples")
    return train, test
