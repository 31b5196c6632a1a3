"""The segmentation network: encoder-decoder FCN with a terrain-conditioned
attention mask.

The U-Net-style body doubles filters at each of ``depth`` encoder levels
(``base_filters`` at the top), pools 2x between levels, and mirrors the
encoder with bilinear upsampling plus skip concatenation; the head is a
1x1 convolution with a sigmoid. Each block is Conv-BN-ReLU twice followed
by Dropout; the innermost encoder block has no Dropout.

The attention net maps the reach-angle channel through three 3x3 Conv+ReLU
layers and a 1x1 Conv+sigmoid into a multiplicative (0,1) mask for the SAR
channels only; its receptive field is exactly 7x7. The slope channel is
never masked. With ``par_mode="concat"`` the reach angle is instead passed
to the U-Net as an extra input channel; with ``par_mode="none"`` it is
absent altogether.

Angle-valued input channels (slope, reach angle) are scaled by 1/90 on
entry so all network inputs share the [0, 1]-ish range of the SAR channels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .layers import (
    BatchNorm2D, Conv2D, Dropout, MaxPool2x2, ReLU, Sigmoid, UpsampleBilinear2x,
)

__all__ = ["ModelConfig", "Model", "build_model", "save_model", "load_model"]

WEIGHT_MAGIC = b"AVW1"
PAR_MODES = ("attention", "concat", "none")
ANGLE_SCALE = 1.0 / 90.0


@dataclass(frozen=True)
class ModelConfig:
    """Network topology knobs.

    ``sar_channels`` counts the change channels at the front of the input
    stack (masked by attention when active); ``include_slope`` appends the
    slope channel, and ``par_mode`` selects how the reach-angle channel is
    used. The full-scale configuration is base_filters=32, depth=5; the
    desk-scale default is small enough to train on a CPU.
    """

    base_filters: int = 8
    depth: int = 4
    dropout_rate: float = 0.4
    attention_filters: int = 32
    sar_channels: int = 3
    include_slope: bool = True
    par_mode: str = "attention"

    def __post_init__(self):
        if self.base_filters < 1 or self.depth < 2:
            raise ValueError("need base_filters >= 1 and depth >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.par_mode not in PAR_MODES:
            raise ValueError(f"par_mode must be one of {PAR_MODES}, got {self.par_mode!r}")
        if self.sar_channels < 1:
            raise ValueError("need at least one SAR channel")

    @property
    def use_attention(self) -> bool:
        return self.par_mode == "attention"

    @property
    def stack_channels(self) -> int:
        """Channels expected in the input stack (SAR + slope? + reach angle?)."""
        return self.sar_channels + int(self.include_slope) + int(self.par_mode != "none")

    @property
    def in_channels(self) -> int:
        """Channels entering the U-Net body."""
        return self.sar_channels + int(self.include_slope) + int(self.par_mode == "concat")

    @property
    def innermost_filters(self) -> int:
        return self.base_filters * 2 ** (self.depth - 1)

    @property
    def size_divisor(self) -> int:
        return 2 ** (self.depth - 1)


class _ConvBNReLU:
    def __init__(self, in_ch, out_ch, rng, dtype):
        self.conv = Conv2D(in_ch, out_ch, 3, rng, dtype)
        self.bn = BatchNorm2D(out_ch, dtype)
        self.relu = ReLU()

    def forward(self, x, training, rng=None):
        return self.relu.forward(self.bn.forward(self.conv.forward(x, training), training), training)

    def backward(self, gy):
        return self.conv.backward(self.bn.backward(self.relu.backward(gy)))

    def modules(self):
        return (("conv", self.conv), ("bn", self.bn))


class _Block:
    """Two Conv-BN-ReLU units with optional trailing Dropout."""

    def __init__(self, in_ch, out_ch, dropout_rate, rng, dtype, with_dropout=True):
        self.unit1 = _ConvBNReLU(in_ch, out_ch, rng, dtype)
        self.unit2 = _ConvBNReLU(out_ch, out_ch, rng, dtype)
        self.dropout = Dropout(dropout_rate) if with_dropout else None

    def forward(self, x, training, rng=None):
        y = self.unit2.forward(self.unit1.forward(x, training), training)
        if self.dropout is not None:
            y = self.dropout.forward(y, training, rng)
        return y

    def backward(self, gy):
        if self.dropout is not None:
            gy = self.dropout.backward(gy)
        return self.unit1.backward(self.unit2.backward(gy))

    def modules(self):
        out = [("conv1", self.unit1.conv), ("bn1", self.unit1.bn),
               ("conv2", self.unit2.conv), ("bn2", self.unit2.bn)]
        return out


class _AttentionNet:
    """Three 3x3 Conv+ReLU layers and a 1x1 Conv+sigmoid; 7x7 receptive field."""

    def __init__(self, filters, rng, dtype):
        self.conv1 = Conv2D(1, filters, 3, rng, dtype)
        self.conv2 = Conv2D(filters, filters, 3, rng, dtype)
        self.conv3 = Conv2D(filters, filters, 3, rng, dtype)
        self.head = Conv2D(filters, 1, 1, rng, dtype)
        self.r1, self.r2, self.r3 = ReLU(), ReLU(), ReLU()
        self.sig = Sigmoid()

    def forward(self, par, training=False):
        y = self.r1.forward(self.conv1.forward(par, training), training)
        y = self.r2.forward(self.conv2.forward(y, training), training)
        y = self.r3.forward(self.conv3.forward(y, training), training)
        return self.sig.forward(self.head.forward(y, training), training)

    def backward(self, gy):
        g = self.head.backward(self.sig.backward(gy))
        g = self.conv3.backward(self.r3.backward(g))
        g = self.conv2.backward(self.r2.backward(g))
        return self.conv1.backward(self.r1.backward(g))

    def modules(self):
        return (("conv1", self.conv1), ("conv2", self.conv2),
                ("conv3", self.conv3), ("head", self.head))


class Model:
    """Parameter container plus forward/backward through the full topology."""

    def __init__(self, cfg: ModelConfig, seed: int, dtype=np.float32):
        self.cfg = cfg
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))

        f = cfg.base_filters
        self.attention = _AttentionNet(cfg.attention_filters, rng, dtype) if cfg.use_attention else None

        self.enc_blocks = []
        in_ch = cfg.in_channels
        for i in range(cfg.depth):
            out_ch = f * 2 ** i
            innermost = i == cfg.depth - 1
            self.enc_blocks.append(
                _Block(in_ch, out_ch, cfg.dropout_rate, rng, dtype, with_dropout=not innermost))
            in_ch = out_ch
        self.pools = [MaxPool2x2() for _ in range(cfg.depth - 1)]

        self.dec_blocks = []
        self.upsamples = []
        for j in range(cfg.depth - 2, -1, -1):
            deep_ch = f * 2 ** (j + 1)
            skip_ch = f * 2 ** j
            self.upsamples.append(UpsampleBilinear2x())
            self.dec_blocks.append(
                _Block(deep_ch + skip_ch, skip_ch, cfg.dropout_rate, rng, dtype, with_dropout=True))

        self.head = Conv2D(f, 1, 1, rng, dtype)
        self.head_sig = Sigmoid()
        self._fcache = None

    # -- parameter registry ------------------------------------------------

    def _named_modules(self):
        if self.attention is not None:
            for name, m in self.attention.modules():
                yield f"attn.{name}", m
        for i, blk in enumerate(self.enc_blocks):
            for name, m in blk.modules():
                yield f"enc{i}.{name}", m
        for j, blk in enumerate(self.dec_blocks):
            for name, m in blk.modules():
                yield f"dec{j}.{name}", m
        yield "head", self.head

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable tensors, in fixed topology order."""
        out = {}
        for prefix, m in self._named_modules():
            for name, arr in m.params():
                out[f"{prefix}.{name}"] = arr
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, m in self._named_modules():
            for name, arr in m.grads():
                out[f"{prefix}.{name}"] = arr
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        """All persistent tensors: parameters plus batch-norm running stats."""
        out = dict(self.parameters())
        for prefix, m in self._named_modules():
            if isinstance(m, BatchNorm2D):
                for name, arr in m.stats():
                    out[f"{prefix}.{name}"] = arr
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.state_tensors()
        missing = own.keys() - tensors.keys()
        extra = tensors.keys() - own.keys()
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in own.items():
            src = np.asarray(tensors[name], dtype=arr.dtype)
            if src.shape != arr.shape:
                raise ValueError(f"tensor {name}: shape {src.shape} != expected {arr.shape}")
            arr[...] = src

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_tensors().items()}

    def zero_grads(self) -> None:
        for g in self.gradients().values():
            g[...] = 0

    def parameter_count(self) -> int:
        return sum(int(np.prod(a.shape)) for a in self.parameters().values())

    def astype(self, dtype) -> "Model":
        """Same topology and values at a different float precision."""
        other = Model(self.cfg, self.seed, dtype=dtype)
        other.load_state({k: v.astype(dtype) for k, v in self.state_tensors().items()})
        return other

    # -- forward / backward -------------------------------------------------

    def _check_input(self, stack: np.ndarray) -> None:
        if stack.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) input, got shape {stack.shape}")
        if stack.shape[1] != self.cfg.stack_channels:
            raise ValueError(
                f"expected {self.cfg.stack_channels} stack channels, got {stack.shape[1]}")
        div = self.cfg.size_divisor
        if stack.shape[2] % div or stack.shape[3] % div:
            raise ValueError(
                f"spatial size {stack.shape[2]}x{stack.shape[3]} not divisible by {div}")

    def _scale_input(self, stack: np.ndarray) -> np.ndarray:
        """Bring angle channels into the SAR channels' unit range."""
        scale = np.ones(self.cfg.stack_channels, dtype=stack.dtype)
        scale[self.cfg.sar_channels:] = ANGLE_SCALE
        return stack * scale[:, None, None]

    def attention_forward(self, par: np.ndarray) -> np.ndarray:
        """Mask in (0,1) from a single-channel reach-angle tensor (raw degrees)."""
        if self.attention is None:
            raise ValueError("model was built without an attention net")
        if par.ndim != 4 or par.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) input, got {par.shape}")
        return self.attention.forward(par.astype(self.dtype.type) * self.dtype.type(ANGLE_SCALE))

    def forward(self, stack: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        """Soft (0,1) mask with the input's spatial shape; (N, 1, H, W)."""
        self._check_input(stack)
        x = self._scale_input(np.asarray(stack, dtype=self.dtype.type))
        nsar = self.cfg.sar_channels

        if self.cfg.use_attention:
            par = x[:, -1:]
            mask = self.attention.forward(par, training)
            sar = x[:, :nsar]
            masked = sar * mask
            body_in = np.concatenate([masked, x[:, nsar:-1]], axis=1)
            att_cache = (sar, mask)
        else:
            body_in = x
            att_cache = None

        skips = []
        y = body_in
        for i, blk in enumerate(self.enc_blocks):
            y = blk.forward(y, training, rng)
            if i < len(self.pools):
                skips.append(y)
                y = self.pools[i].forward(y, training)

        for j, blk in enumerate(self.dec_blocks):
            y = self.upsamples[j].forward(y, training)
            y = np.concatenate([y, skips[-1 - j]], axis=1)
            y = blk.forward(y, training, rng)

        y = self.head_sig.forward(self.head.forward(y, training), training)
        if training:
            self._fcache = att_cache
        return y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the (scaled) input stack; parameter grads accumulate."""
        g = self.head.backward(self.head_sig.backward(gy))
        f = self.cfg.base_filters
        gskips = []
        for j in reversed(range(len(self.dec_blocks))):
            g = self.dec_blocks[j].backward(g)
            skip_ch = f * 2 ** (len(self.dec_blocks) - 1 - j)
            g, gskip = g[:, :-skip_ch], g[:, -skip_ch:]
            gskips.append(gskip)
            g = self.upsamples[j].backward(g)

        for i in reversed(range(len(self.enc_blocks))):
            if i < len(self.pools):
                g = self.pools[i].backward(g)
                g = g + gskips[i]  # gskips[k] holds the level-k skip gradient
            g = self.enc_blocks[i].backward(g)

        if self.cfg.use_attention:
            sar, mask = self._fcache
            nsar = self.cfg.sar_channels
            gmasked = g[:, :nsar]
            gmask = (gmasked * sar).sum(axis=1, keepdims=True)
            gsar = gmasked * mask
            gpar = self.attention.backward(gmask)
            g = np.concatenate([gsar, g[:, nsar:], gpar], axis=1)
        return g

    def predict(self, stack: np.ndarray) -> np.ndarray:
        """Eval-mode forward pass."""
        return self.forward(stack, training=False)


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministic construction: same seed, same initial parameters."""
    return Model(cfg, seed, dtype)


# ---------------------------------------------------------------------------
# Weight file format
# ---------------------------------------------------------------------------


def save_model(model: Model, path) -> None:
    """Write magic, tensor table (f32 little-endian) and a trailing config JSON."""
    tensors = model.state_tensors()
    with open(str(path), "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        blob = {"config": asdict(model.cfg), "seed": model.seed}
        fh.write(json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def load_model(path) -> Model:
    """Rebuild a model from a weight file; bit-exact for float32 models."""
    with open(str(path), "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHT_MAGIC:
            raise ValueError(f"{path}: bad weight-file magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            tensors[name] = data
        blob = json.loads(fh.read().decode("utf-8"))
    cfg = ModelConfig(**blob["config"])
    model = Model(cfg, blob["seed"])
    model.load_state(tensors)
    return model
