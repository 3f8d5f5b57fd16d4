import numpy as np
import pytest

from fbnet.backbone import BackboneConfig
from fbnet.model import FBNet, ModelConfig


def micro_config(strategy: str = "FULL", dtype: str = "float64", num_classes: int = 3,
                 dropout: float = 0.0) -> ModelConfig:
    """Smallest config that exercises every module; f64 for gradient checks."""
    return ModelConfig(backbone=BackboneConfig((4, 4, 8, 8), (1, 1, 1, 1)),
                       c_mid=4, c_sam=8, cam_ratio=2, sam_ratio=4,
                       num_classes=num_classes, strategy=strategy,
                       head_dropout=dropout, dtype=dtype)


def micro_model(strategy: str = "FULL", seed: int = 3, **kw) -> FBNet:
    return FBNet(micro_config(strategy, **kw), np.random.default_rng(seed))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
