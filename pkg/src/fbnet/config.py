"""Plain-text key=value run configuration with a strict schema.

A run config merges model topology, optimizer settings, the synthetic-data
spec (or a dataset directory), seed and output directory into one flat file.
Unknown keys are rejected; the fully resolved config (defaults included) is
echoed into the output directory so every run is self-describing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .data import DataConfig, IGNORE_INDEX, SyntheticSpec
from .errors import ConfigError
from .kernels import ACTIVE_BACKEND, thread_cap
from .model import ModelConfig
from .train import OptimConfig


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _int_list(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in s.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from None


# key -> (parser, default-as-string)
RUN_SCHEMA: dict[str, tuple] = {
    "seed": (int, "0"),
    "out_dir": (str, "runs/out"),
    "dataset_dir": (str, ""),
    "n_samples": (int, "250"),
    # synthetic data
    "num_classes": (int, "5"),
    "height": (int, "64"),
    "width": (int, "64"),
    "shapes_min": (int, "3"),
    "shapes_max": (int, "6"),
    "noise": (float, "0.05"),
    "jitter": (float, "0.10"),
    # model
    "stage_channels": (_int_list, "16,32,64,128"),
    "blocks_per_stage": (_int_list, "1,1,1,1"),
    "c_mid": (int, "32"),
    "c_sam": (int, "64"),
    "cam_ratio": (int, "4"),
    "sam_ratio": (int, "8"),
    "strategy": (str, "FULL"),
    "aux_enabled": (_bool, "true"),
    "head_dropout": (float, "0.1"),
    "sam_qk_bias": (_bool, "true"),
    "dtype": (str, "float32"),
    # optimizer
    "base_lr": (float, "0.02"),
    "momentum": (float, "0.9"),
    "weight_decay": (float, "0.0001"),
    "lr_power": (float, "0.9"),
    "backbone_lr_multiplier": (float, "0.1"),
    "epochs": (int, "50"),
    "batch_size": (int, "8"),
    "aux_weight": (float, "0.4"),
    # augmentation / evaluation
    "base_size": (int, "72"),
    "crop_size": (int, "64"),
    "min_scale": (float, "0.5"),
    "max_scale": (float, "2.0"),
    "flip": (_bool, "true"),
    "augment": (_bool, "true"),
    "val_fraction": (float, "0.2"),
}

GEN_SCHEMA = {k: RUN_SCHEMA[k] for k in
              ("seed", "num_classes", "height", "width", "shapes_min", "shapes_max",
               "noise", "jitter")}


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def resolve(raw: dict[str, str], schema: dict[str, tuple], source: str = "<config>") -> dict:
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"{source}: unknown config key(s): {', '.join(unknown)}")
    resolved = {}
    for key, (parser, default) in schema.items():
        text = raw.get(key, default)
        try:
            resolved[key] = parser(text)
        except (ValueError, TypeError):
            raise ConfigError(f"{source}: bad value for {key}: {text!r}") from None
    return resolved


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    dataset_dir: str
    n_samples: int
    model: ModelConfig
    optim: OptimConfig
    data: DataConfig
    synthetic: SyntheticSpec
    resolved: dict


def _build_run_config(vals: dict) -> RunConfig:
    model = ModelConfig(
        backbone=BackboneConfig(vals["stage_channels"], vals["blocks_per_stage"]),
        c_mid=vals["c_mid"], c_sam=vals["c_sam"], cam_ratio=vals["cam_ratio"],
        sam_ratio=vals["sam_ratio"], num_classes=vals["num_classes"],
        aux_enabled=vals["aux_enabled"], strategy=vals["strategy"],
        head_dropout=vals["head_dropout"], sam_qk_bias=vals["sam_qk_bias"],
        dtype=vals["dtype"])
    optim = OptimConfig(
        base_lr=vals["base_lr"], momentum=vals["momentum"],
        weight_decay=vals["weight_decay"], lr_power=vals["lr_power"],
        backbone_lr_multiplier=vals["backbone_lr_multiplier"], epochs=vals["epochs"],
        batch_size=vals["batch_size"], aux_weight=vals["aux_weight"])
    data = DataConfig(
        base_size=vals["base_size"], crop_size=vals["crop_size"],
        min_scale=vals["min_scale"], max_scale=vals["max_scale"], flip=vals["flip"],
        augment=vals["augment"], val_fraction=vals["val_fraction"])
    synth = SyntheticSpec(
        num_classes=vals["num_classes"], height=vals["height"], width=vals["width"],
        shapes_min=vals["shapes_min"], shapes_max=vals["shapes_max"],
        noise=vals["noise"], jitter=vals["jitter"], seed=vals["seed"])
    return RunConfig(seed=vals["seed"], out_dir=vals["out_dir"],
                     dataset_dir=vals["dataset_dir"], n_samples=vals["n_samples"],
                     model=model, optim=optim, data=data, synthetic=synth,
                     resolved=vals)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    raw = parse_kv_text(path.read_text(), str(path))
    return _build_run_config(resolve(raw, RUN_SCHEMA, str(path)))


def load_gen_spec(path) -> SyntheticSpec:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    vals = resolve(parse_kv_text(path.read_text(), str(path)), GEN_SCHEMA, str(path))
    return SyntheticSpec(num_classes=vals["num_classes"], height=vals["height"],
                         width=vals["width"], shapes_min=vals["shapes_min"],
                         shapes_max=vals["shapes_max"], noise=vals["noise"],
                         jitter=vals["jitter"], seed=vals["seed"])


def resolved_text(resolved: dict) -> str:
    lines = []
    for key in RUN_SCHEMA:
        val = resolved[key]
        if isinstance(val, tuple):
            val = ",".join(map(str, val))
        elif isinstance(val, bool):
            val = str(val).lower()
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def run_metadata(cfg: RunConfig, model_has_aux: bool) -> str:
    """JSON run record: every resolved value plus the fixed convention flags."""
    meta = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.resolved.items()},
        "conventions": {
            "ignore_index": IGNORE_INDEX,
            "crop_padding": {"image": 0.0, "label": IGNORE_INDEX},
            "label_resize": "nearest-neighbor, center sampling for integer factors",
            "loss_resolution": "main at 1/4, auxiliary at 1/8 of the crop",
            "aux_active": model_has_aux,
            "aux_rule": "auxiliary head exists only when the strategy has spatial attention",
            "val_split": "sorted by id, last fraction held out; 0 validates on train",
            "epochs_to_convergence": "earliest epoch attaining the max validation class-mean mIoU",
            "argmax_ties": "lowest class index",
            "fused_channels": cfg.model.fused_channels,
        },
        "backend": {"kernels": ACTIVE_BACKEND, "threads": thread_cap() or 1},
    }
    return json.dumps(meta, indent=2, sort_keys=True) + "\n"
