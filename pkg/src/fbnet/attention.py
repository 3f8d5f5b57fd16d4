"""Channel and spatial attention blocks.

Channel attention re-weights the channel vector at every spatial location
independently: a shared two-layer bottleneck produces per-channel logits, a
channel-axis softmax turns them into a probability vector, and the result is
added to the input features.

Spatial attention is a reduced self-attention over the N = H*W locations of a
low-resolution map: 1x1 key/query projections feed a row-stochastic N x N
matrix that mixes 1x1-projected values, added residually to the input.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Ctx, EVAL, Module
from .tensor import Tensor


class CamBlock(Module):
    """Per-location channel attention with a bottleneck of width C/ratio."""

    def __init__(self, channels: int, ratio: int, rng: np.random.Generator, dtype=np.float32):
        if ratio < 1 or channels % ratio != 0:
            raise ConfigError(f"cam ratio {ratio} must be a positive divisor of {channels} channels")
        self.channels = channels
        self.ratio = ratio
        self.squeeze = Conv2d(channels, channels // ratio, 1, rng, dtype=dtype)
        self.expand = Conv2d(channels // ratio, channels, 1, rng, dtype=dtype)

    def attention(self, y: Tensor, ctx: Ctx = EVAL) -> Tensor:
        """Channel probability map, same shape as the input, channel-sums to 1."""
        if y.ndim != 4 or y.shape[1] != self.channels:
            raise ConfigError(f"cam block built for {self.channels} channels, got input {y.shape}")
        h = T.relu(self.squeeze.forward(y, ctx))
        return T.softmax(self.expand.forward(h, ctx), axis=1)

    def forward(self, y: Tensor, ctx: Ctx = EVAL) -> Tensor:
        att = self.attention(y, ctx)
        if ctx.capture is not None:
            ctx.capture["cam_attention"] = att.data.copy()
        return att + y


def cam_forward(y: Tensor, block: CamBlock, ctx: Ctx = EVAL) -> Tensor:
    return block.forward(y, ctx)


class SamBlock(Module):
    """Residual self-attention over spatial positions of a B,C,H,W map."""

    def __init__(self, channels: int, qk_channels: int, rng: np.random.Generator,
                 qk_bias: bool = True, dtype=np.float32):
        if qk_channels < 1:
            raise ConfigError(f"sam key/query width must be >= 1, got {qk_channels}")
        self.channels = channels
        self.qk_channels = qk_channels
        self.key = Conv2d(channels, qk_channels, 1, rng, bias=qk_bias, dtype=dtype)
        self.query = Conv2d(channels, qk_channels, 1, rng, bias=qk_bias, dtype=dtype)
        self.value = Conv2d(channels, channels, 1, rng, dtype=dtype)

    def attention(self, x: Tensor, ctx: Ctx = EVAL) -> Tensor:
        """Row-stochastic B,N,N matrix; row n is location n's weighting of all locations."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"sam block built for {self.channels} channels, got input {x.shape}")
        b, _, h, w = x.shape
        n = h * w
        sk = T.reshape(self.key.forward(x, ctx), (b, self.qk_channels, n))
        sq = T.reshape(self.query.forward(x, ctx), (b, self.qk_channels, n))
        logits = T.matmul(T.swapaxes(sq, 1, 2), sk)
        return T.softmax(logits, axis=2)

    def forward(self, x: Tensor, ctx: Ctx = EVAL) -> Tensor:
        b, c, h, w = x.shape
        n = h * w
        sa = self.attention(x, ctx)
        if ctx.capture is not None:
            ctx.capture["sam_attention"] = sa.data.copy()
            ctx.capture["sam_grid"] = (h, w)
        sv = T.reshape(self.value.forward(x, ctx), (b, c, n))
        mixed = T.matmul(sa, T.swapaxes(sv, 1, 2))          # B,N,C
        mixed = T.reshape(T.swapaxes(mixed, 1, 2), (b, c, h, w))
        return mixed + x


def sam_forward(x: Tensor, block: SamBlock, ctx: Ctx = EVAL) -> Tensor:
    return block.forward(x, ctx)


def sam_attention_matrix(x: Tensor, block: SamBlock) -> Tensor:
    """The N x N attention matrix of a single sample, for inspection/export."""
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"sam_attention_matrix expects a single 1,C,H,W sample, got {x.shape}")
    with T.no_grad():
        sa = block.attention(x)
    return Tensor(sa.data[0].copy())


# ---------------------------------------------------------------------------
# attention-map export
# ---------------------------------------------------------------------------

def write_pgm(path, arr: np.ndarray) -> None:
    """Min-max normalized grayscale P5 file; constant maps become all zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        img = np.round((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        img = np.zeros(arr.shape, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ShapeError(f"{path}: not an 8-bit P5 file")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w)


def export_attention_maps(model, sample, out_dir, cam_channels: int = 8,
                          sam_rows: int = 8) -> dict[str, list[str]]:
    """Render attention intermediates of one sample as grayscale PGM files.

    Channel-attention maps come out one per channel at the map's native
    resolution; spatial-attention rows are reshaped back to the low-resolution
    grid.  Returns the written paths keyed by kind.
    """
    image = getattr(sample, "image", sample)
    if isinstance(image, Tensor):
        image = image.data
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected a C,H,W image, got shape {image.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    capture: dict = {}
    with T.no_grad():
        model.forward(Tensor(image[None], dtype=model.dtype), Ctx(capture=capture))

    written: dict[str, list[str]] = {"cam": [], "sam": []}
    if "cam_attention" in capture:
        att = capture["cam_attention"][0]
        if cam_channels > att.shape[0]:
            raise ConfigError(f"requested {cam_channels} channel maps, model has {att.shape[0]}")
        for k in range(cam_channels):
            p = out_dir / f"cam_{k:03d}.pgm"
            write_pgm(p, att[k])
            written["cam"].append(str(p))
    if "sam_attention" in capture:
        sa = capture["sam_attention"][0]
        grid = capture["sam_grid"]
        if sam_rows > sa.shape[0]:
            raise ConfigError(f"requested {sam_rows} attention rows, matrix has {sa.shape[0]}")
        for r in range(sam_rows):
            p = out_dir / f"sam_row_{r:03d}.pgm"
            write_pgm(p, sa[r].reshape(grid))
            written["sam"].append(str(p))
    return written
