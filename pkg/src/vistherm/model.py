"""Visible-to-thermal convolutional autoencoder.

Encoder/decoder layout (U-Net style): four encoder stages of
``[conv3x3 -> batchnorm -> ReLU] x2`` followed by 2x2 max pooling, a
bottleneck block at 512 channels (14x14 for 224 inputs), and a mirrored
decoder whose upsampling is either a learned 2x2 stride-2 up-convolution
(``upconv``) or fixed bilinear interpolation followed by a 1x1
channel-reduction convolution (``bilinear``). Both variants present
identical shapes to the shared stage convolutions. Skip connections
concatenate each encoder stage output with the matching decoder stage. A
final 1x1 convolution plus sigmoid produces the output map in ``[0, 1]``.

Weight-store binary layout (little-endian throughout), for cross-language
loading::

    magic   4 bytes  b"VTW1"
    version uint32
    fplen   uint32, then fplen bytes of ASCII config fingerprint (sha256 hex
            of the canonical ModelConfig JSON: sorted keys, compact separators)
    count   uint32 number of tensors
    per tensor:
        name  uint16 length + UTF-8 bytes
        ndim  uint8, then ndim x uint32 dimensions
        data  float32 values in C order

Stored tensors are every ``state_dict`` entry except batch-norm
``num_batches_tracked`` counters (unused under fixed momentum); batch-norm
running statistics are included so inference is reproducible.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

WEIGHT_MAGIC = b"VTW1"
WEIGHT_FORMAT_VERSION = 1

BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1


class WeightStoreError(RuntimeError):
    """Raised for malformed weight files or incompatible model configs."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; the default is the 224-input production net.

    Smaller ``input_size``/``encoder_channels`` settings are accepted for
    reduced-scale testing (e.g. finite-difference gradient checks).
    """

    input_size: int = 224
    input_channels: int = 3
    output_channels: int = 1
    encoder_channels: tuple[int, ...] = (64, 128, 256, 512)
    bottleneck_channels: int = 512
    decoder_variant: str = "upconv"
    use_skip_connections: bool = True
    conv_kernel: int = 3
    pool_window: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.decoder_variant not in ("bilinear", "upconv"):
            raise ValueError(f"unknown decoder variant {self.decoder_variant!r}")
        if not self.encoder_channels or any(c < 1 for c in self.encoder_channels):
            raise ValueError("encoder_channels must be a non-empty tuple of positive widths")
        if self.bottleneck_channels != self.encoder_channels[-1]:
            raise ValueError(
                f"bottleneck_channels ({self.bottleneck_channels}) must equal the last "
                f"encoder width ({self.encoder_channels[-1]})"
            )
        if self.input_channels not in (1, 3):
            raise ValueError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if self.output_channels < 1:
            raise ValueError("output_channels must be positive")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.pool_window < 2:
            raise ValueError(f"pool_window must be >= 2, got {self.pool_window}")
        stride = self.pool_window ** len(self.encoder_channels)
        if self.input_size < stride or self.input_size % stride != 0:
            raise ValueError(
                f"input_size {self.input_size} is not divisible by the total pooling "
                f"stride {stride}"
            )

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // self.pool_window ** len(self.encoder_channels)

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("ascii")).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "encoder_channels": tuple(d.get("encoder_channels", (64, 128, 256, 512)))})


class _ConvBlock(nn.Module):
    """[conv -> batchnorm -> ReLU] twice at a fixed width."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel, padding=pad),
            nn.BatchNorm2d(out_channels, eps=BATCHNORM_EPS, momentum=BATCHNORM_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel, padding=pad),
            nn.BatchNorm2d(out_channels, eps=BATCHNORM_EPS, momentum=BATCHNORM_MOMENTUM),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class _Upsampler(nn.Module):
    """Double the spatial size and move to the matching encoder width."""

    def __init__(self, in_channels: int, out_channels: int, variant: str, window: int):
        super().__init__()
        if variant == "upconv":
            self.up = nn.ConvTranspose2d(in_channels, out_channels, window, stride=window)
        else:
            self.up = nn.Sequential(
                nn.Upsample(scale_factor=window, mode="bilinear", align_corners=False),
                nn.Conv2d(in_channels, out_channels, 1),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(x)


class VisibleToThermalNet(nn.Module):
    """Maps visible face images to thermal-band face images."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        stages = []
        ch = config.input_channels
        for width in config.encoder_channels:
            stages.append(_ConvBlock(ch, width, config.conv_kernel))
            ch = width
        self.encoder = nn.ModuleList(stages)
        self.pool = nn.MaxPool2d(config.pool_window)
        self.bottleneck = _ConvBlock(ch, config.bottleneck_channels, config.conv_kernel)
        ups, blocks = [], []
        ch = config.bottleneck_channels
        for width in reversed(config.encoder_channels):
            ups.append(_Upsampler(ch, width, config.decoder_variant, config.pool_window))
            stage_in = 2 * width if config.use_skip_connections else width
            blocks.append(_ConvBlock(stage_in, width, config.conv_kernel))
            ch = width
        self.upsamplers = nn.ModuleList(ups)
        self.decoder = nn.ModuleList(blocks)
        self.head = nn.Conv2d(ch, config.output_channels, 1)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Encoder plus bottleneck only; returns the bottleneck activation."""
        for block in self.encoder:
            x = self.pool(block(x))
        return self.bottleneck(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, block, skip in zip(self.upsamplers, self.decoder, reversed(skips)):
            x = up(x)
            if self.config.use_skip_connections:
                x = torch.cat([x, skip], dim=1)
            x = block(x)
        return torch.sigmoid(self.head(x))


def build_model(config: ModelConfig, seed: int) -> VisibleToThermalNet:
    """Construct the network and initialize it deterministically from ``seed``.

    Convolution weights (including up-convolutions) draw from
    ``N(0, 2 / fan_in)`` with ``fan_in = in_channels * kernel_area``; biases
    start at zero, batch-norm at scale 1 / shift 0.
    """
    net = VisibleToThermalNet(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
                module.reset_running_stats()
    return net


def count_parameters(model: VisibleToThermalNet) -> int:
    """Total trainable parameter elements."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _check_batch(model: VisibleToThermalNet, batch: torch.Tensor) -> None:
    cfg = model.config
    if batch.ndim != 4 or batch.shape[1] != cfg.input_channels:
        raise ValueError(
            f"expected (N, {cfg.input_channels}, {cfg.input_size}, {cfg.input_size}) batch, "
            f"got shape {tuple(batch.shape)}"
        )
    if batch.shape[2] != cfg.input_size or batch.shape[3] != cfg.input_size:
        raise ValueError(
            f"expected spatial size {cfg.input_size}x{cfg.input_size}, "
            f"got {batch.shape[2]}x{batch.shape[3]}"
        )


def infer_batch(
    model: VisibleToThermalNet, images: np.ndarray | torch.Tensor, chunk: int = 8
) -> np.ndarray:
    """Inference-mode forward pass (batch-norm running statistics).

    Accepts an ``(N, C, H, W)`` array, returns ``(N, out_channels, H, W)``
    float32 with values in ``[0, 1]``.
    """
    batch = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    _check_batch(model, batch)
    was_training = model.training
    model.eval()
    try:
        outputs = []
        with torch.no_grad():
            for start in range(0, batch.shape[0], chunk):
                outputs.append(model(batch[start : start + chunk]))
    finally:
        model.train(was_training)
    return torch.cat(outputs).numpy()


# ---------------------------------------------------------------------------
# Weight serialization
# ---------------------------------------------------------------------------


@dataclass
class WeightStore:
    """Named float32 tensors plus the config fingerprint they belong to."""

    fingerprint: str
    tensors: dict[str, np.ndarray]
    version: int = WEIGHT_FORMAT_VERSION


def _storable_state(model: VisibleToThermalNet) -> dict[str, torch.Tensor]:
    return {
        name: tensor
        for name, tensor in model.state_dict().items()
        if not name.endswith("num_batches_tracked")
    }


def save_weights(model: VisibleToThermalNet) -> WeightStore:
    tensors = {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in _storable_state(model).items()
    }
    return WeightStore(fingerprint=model.config.fingerprint(), tensors=tensors)


def load_weights(model: VisibleToThermalNet, store: WeightStore) -> VisibleToThermalNet:
    """Load a store into a model of the identical config; model untouched on error."""
    if store.fingerprint != model.config.fingerprint():
        raise WeightStoreError(
            f"config fingerprint mismatch: store {store.fingerprint[:12]}..., "
            f"model {model.config.fingerprint()[:12]}..."
        )
    expected = _storable_state(model)
    missing = sorted(set(expected) - set(store.tensors))
    extra = sorted(set(store.tensors) - set(expected))
    if missing or extra:
        raise WeightStoreError(f"tensor name mismatch: missing {missing}, extra {extra}")
    staged = {}
    for name, tensor in expected.items():
        values = store.tensors[name]
        if tuple(values.shape) != tuple(tensor.shape):
            raise WeightStoreError(
                f"shape mismatch for {name}: store {values.shape}, model {tuple(tensor.shape)}"
            )
        staged[name] = torch.from_numpy(np.ascontiguousarray(values)).to(tensor.dtype)
    model.load_state_dict(staged, strict=False)
    return model


def pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize named float32 tensors in the documented binary layout (no header)."""
    out = io.BytesIO()
    out.write(struct.pack("<I", len(tensors)))
    for name, values in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(values, dtype="<f4")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def unpack_tensors(buf: io.BufferedIOBase) -> dict[str, np.ndarray]:
    def read(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise WeightStoreError("truncated weight data")
        return chunk

    (count,) = struct.unpack("<I", read(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", read(2))
        name = read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        values = np.frombuffer(read(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = values.copy()
    return tensors


def write_weight_store(store: WeightStore, path) -> None:
    fp = store.fingerprint.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", store.version))
        fh.write(struct.pack("<I", len(fp)))
        fh.write(fp)
        fh.write(pack_tensors(store.tensors))


def read_weight_store(path) -> WeightStore:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHT_MAGIC:
            raise WeightStoreError(f"not a weight store (bad magic {magic!r})")
        header = fh.read(8)
        if len(header) != 8:
            raise WeightStoreError("truncated weight store header")
        version, fp_len = struct.unpack("<II", header)
        if version != WEIGHT_FORMAT_VERSION:
            raise WeightStoreError(f"unsupported weight format version {version}")
        fp = fh.read(fp_len)
        if len(fp) != fp_len:
            raise WeightStoreError("truncated fingerprint")
        tensors = unpack_tensors(fh)
    return WeightStore(fingerprint=fp.decode("ascii"), tensors=tensors, version=version)
