"""Full network assembly: backbone, mid-level transforms, attention, fusion, heads.

Wiring per strategy (the rows of the ablation study):

* ``FULL``     - stage-4 features pass a two-conv transform to the spatial
  branch width, then spatial attention (its output feeds the auxiliary head);
  stages 1-3 pass mid transforms; everything is fused at 1/4 resolution,
  boosted by channel attention, and classified.
* ``SAM``      - spatial attention directly on stage-4 features, then the head.
* ``CAM``      - channel attention directly on stage-4 features, then the head.
* ``FF``       - fusion of the four transformed branches without any attention.
* ``SERIES``   - channel attention then spatial attention on stage-4 features.
* ``PARALLEL`` - channel and spatial attention applied to the same stage-4
  features, outputs summed.

Every strategy emits main logits at 1/4 of the input extent; strategies whose
attention runs at 1/8 are upsampled x2 before the head so the auxiliary output
(at 1/8, attached to the spatial-attention output) stays at exactly half the
main resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io as fio
from . import tensor as T
from .attention import CamBlock, SamBlock
from .backbone import Backbone, BackboneConfig
from .errors import ConfigError, DataError, ShapeError
from .nn import ConvBNReLU, Conv2d, BatchNorm2d, Ctx, Dropout, EVAL, Module
from .tensor import Tensor

STRATEGIES = ("SAM", "CAM", "FF", "PARALLEL", "SERIES", "FULL")

# strategies that instantiate a spatial attention block (and with it, the aux head)
_HAS_SAM = {"SAM", "SERIES", "PARALLEL", "FULL"}
_HAS_CAM = {"CAM", "SERIES", "PARALLEL", "FULL"}
_HAS_FUSION = {"FF", "FULL"}


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    c_mid: int = 32
    c_sam: int = 64
    cam_ratio: int = 4
    sam_ratio: int = 8
    num_classes: int = 5
    aux_enabled: bool = True
    strategy: str = "FULL"
    head_dropout: float = 0.1
    sam_qk_bias: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.c_mid, self.c_sam, self.cam_ratio, self.sam_ratio) < 1:
            raise ConfigError("c_mid, c_sam, cam_ratio and sam_ratio must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def fused_channels(self) -> int:
        return 3 * self.c_mid + self.c_sam

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_flat(self) -> dict[str, str]:
        return {
            "stage_channels": ",".join(map(str, self.backbone.stage_channels)),
            "blocks_per_stage": ",".join(map(str, self.backbone.blocks_per_stage)),
            "c_mid": str(self.c_mid),
            "c_sam": str(self.c_sam),
            "cam_ratio": str(self.cam_ratio),
            "sam_ratio": str(self.sam_ratio),
            "num_classes": str(self.num_classes),
            "aux_enabled": str(self.aux_enabled).lower(),
            "strategy": self.strategy,
            "head_dropout": str(self.head_dropout),
            "sam_qk_bias": str(self.sam_qk_bias).lower(),
            "dtype": self.dtype,
        }

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "ModelConfig":
        def ints(s):
            return tuple(int(v) for v in s.split(","))

        return cls(
            backbone=BackboneConfig(ints(flat["stage_channels"]), ints(flat["blocks_per_stage"])),
            c_mid=int(flat["c_mid"]),
            c_sam=int(flat["c_sam"]),
            cam_ratio=int(flat["cam_ratio"]),
            sam_ratio=int(flat["sam_ratio"]),
            num_classes=int(flat["num_classes"]),
            aux_enabled=flat["aux_enabled"] == "true",
            strategy=flat["strategy"],
            head_dropout=float(flat["head_dropout"]),
            sam_qk_bias=flat.get("sam_qk_bias", "true") == "true",
            dtype=flat.get("dtype", "float32"),
        )


@dataclass
class NetworkOutput:
    main_logits: Tensor
    aux_logits: Tensor | None = None


class MidTransform(Module):
    """Two sequential conv+norm+ReLU layers at a fixed output width."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        self.layer1 = ConvBNReLU(cin, cout, rng, dtype=dtype)
        self.layer2 = ConvBNReLU(cout, cout, rng, dtype=dtype)

    def forward(self, x: Tensor, ctx: Ctx = EVAL) -> Tensor:
        return self.layer2.forward(self.layer1.forward(x, ctx), ctx)


def mid_transform(x: Tensor, transform: MidTransform, ctx: Ctx = EVAL) -> Tensor:
    return transform.forward(x, ctx)


class ClassifierHead(Module):
    """conv3x3 (C -> C/4) + norm + ReLU + dropout + 1x1 conv to class logits."""

    def __init__(self, cin: int, num_classes: int, rng, dropout_p: float = 0.1, dtype=np.float32):
        cmid = max(cin // 4, 1)
        self.reduce = Conv2d(cin, cmid, 3, rng, padding=1, dtype=dtype)
        self.bn = BatchNorm2d(cmid, dtype=dtype)
        self.drop = Dropout(dropout_p)
        self.classify = Conv2d(cmid, num_classes, 1, rng, dtype=dtype)

    def forward(self, x: Tensor, ctx: Ctx = EVAL) -> Tensor:
        h = T.relu(self.bn.forward(self.reduce.forward(x, ctx), ctx))
        return self.classify.forward(self.drop.forward(h, ctx), ctx)


def fuse_features(f1: Tensor, f2: Tensor, f3: Tensor, f4: Tensor) -> Tensor:
    """Upsample the three 1/8-resolution maps x2 and concatenate after the 1/4 map.

    Channel order is [f1, f2, f3, f4]; output width is the sum of the four.
    """
    up = [T.bilinear_upsample(f, 2) for f in (f2, f3, f4)]
    for name, f in zip(("f2", "f3", "f4"), up):
        if f.shape[2:] != f1.shape[2:]:
            raise ShapeError(f"fusion: {name} extent {f.shape[2:]} != {f1.shape[2:]} after upsampling")
    return T.concat([f1, *up], axis=1)


class FBNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dtype = cfg.np_dtype
        self.dtype = dtype
        c4 = cfg.backbone.stage_channels[3]
        self.backbone = Backbone(cfg.backbone, rng, dtype=dtype)

        strat = cfg.strategy
        if strat in _HAS_FUSION:
            self.mid = [MidTransform(cfg.backbone.stage_channels[i], cfg.c_mid, rng, dtype)
                        for i in range(3)]
            self.branch4 = MidTransform(c4, cfg.c_sam, rng, dtype)
            head_in = cfg.fused_channels
            sam_width = cfg.c_sam
        else:
            self.mid = []
            self.branch4 = None
            head_in = c4
            sam_width = c4

        self.sam = None
        self.cam = None
        if strat in _HAS_SAM:
            qk = max(1, sam_width // cfg.sam_ratio)
            self.sam = SamBlock(sam_width, qk, rng, qk_bias=cfg.sam_qk_bias, dtype=dtype)
        if strat in _HAS_CAM:
            cam_width = cfg.fused_channels if strat == "FULL" else c4
            self.cam = CamBlock(cam_width, cfg.cam_ratio, rng, dtype=dtype)

        self.head = ClassifierHead(head_in, cfg.num_classes, rng, cfg.head_dropout, dtype)
        self.aux_head = None
        if cfg.aux_enabled and self.sam is not None:
            self.aux_head = ClassifierHead(sam_width, cfg.num_classes, rng, cfg.head_dropout, dtype)

    @property
    def has_aux(self) -> bool:
        return self.aux_head is not None

    def forward(self, img: Tensor, ctx: Ctx = EVAL) -> NetworkOutput:
        f1, f2, f3, f4 = self.backbone.forward(img, ctx)
        strat = self.cfg.strategy
        aux_in = None

        if strat == "FULL":
            sam_in = self.branch4.forward(f4, ctx)
            sam_out = self.sam.forward(sam_in, ctx)
            aux_in = sam_out
            fused = fuse_features(self.mid[0].forward(f1, ctx),
                                  self.mid[1].forward(f2, ctx),
                                  self.mid[2].forward(f3, ctx),
                                  sam_out)
            feats = self.cam.forward(fused, ctx)
        elif strat == "FF":
            fused = fuse_features(self.mid[0].forward(f1, ctx),
                                  self.mid[1].forward(f2, ctx),
                                  self.mid[2].forward(f3, ctx),
                                  self.branch4.forward(f4, ctx))
            feats = fused
        elif strat == "SAM":
            aux_in = self.sam.forward(f4, ctx)
            feats = T.bilinear_upsample(aux_in, 2)
        elif strat == "CAM":
            feats = T.bilinear_upsample(self.cam.forward(f4, ctx), 2)
        elif strat == "SERIES":
            aux_in = self.sam.forward(self.cam.forward(f4, ctx), ctx)
            feats = T.bilinear_upsample(aux_in, 2)
        else:  # PARALLEL
            aux_in = self.sam.forward(f4, ctx)
            feats = T.bilinear_upsample(self.cam.forward(f4, ctx) + aux_in, 2)

        main = self.head.forward(feats, ctx)
        aux = self.aux_head.forward(aux_in, ctx) if self.aux_head is not None else None
        return NetworkOutput(main_logits=main, aux_logits=aux)


def fbnet_forward(img: Tensor, model: FBNet, ctx: Ctx = EVAL) -> NetworkOutput:
    return model.forward(img, ctx)


def count_parameters(model: Module) -> dict[str, int]:
    """Trainable-scalar counts per top-level component plus the total."""
    counts: dict[str, int] = {}
    total = 0
    for name, t in model.named_parameters():
        top = name.split(".", 1)[0]
        counts[top] = counts.get(top, 0) + t.size
        total += t.size
    counts["total"] = total
    return counts


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(path, model: FBNet, extra: dict[str, str] | None = None) -> None:
    cfg = dict(model.cfg.to_flat())
    if extra:
        overlap = set(extra) & set(cfg)
        if overlap:
            raise ConfigError(f"extra checkpoint keys collide with model config: {sorted(overlap)}")
        cfg.update({k: str(v) for k, v in extra.items()})
    fio.save_checkpoint(path, model.state(), cfg)


def load_model(path) -> tuple[FBNet, dict[str, str]]:
    """Rebuild a model from a checkpoint; returns it with the header config."""
    tensors, flat = fio.load_checkpoint(path)
    try:
        cfg = ModelConfig.from_flat(flat)
    except KeyError as e:
        raise DataError(f"{path}: checkpoint header missing model key {e}") from None
    model = FBNet(cfg, np.random.default_rng(0))
    model.load_state(tensors)
    return model, flat
